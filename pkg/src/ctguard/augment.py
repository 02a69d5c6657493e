"""Deterministic augmentation family: flips, axis shifts, center rotations.

The full family maps one square image to 71 variants: the original, 3
flips, 8 shifts of +/-4 pixels, and 59 rotations in 6-degree steps.
Quarter-turn rotations are exact index permutations; every other angle
uses inverse-mapped bilinear resampling about the image center with
out-of-image samples read as zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AugmentError(Exception):
    pass


class NonSquareRotation(AugmentError):
    """Rotation members requested for a non-square image."""


@dataclass(frozen=True)
class AugmentSpec:
    flips: bool = True
    shifts: bool = True
    shift_magnitude: int = 4
    rotations: bool = True
    rotation_step: int = 6

    def __post_init__(self):
        if self.shift_magnitude < 1:
            raise ValueError("shift_magnitude must be >= 1")
        if self.rotation_step < 1 or 360 % self.rotation_step:
            raise ValueError("rotation_step must divide 360")

    def family_size(self) -> int:
        n = 1
        if self.flips:
            n += 3
        if self.shifts:
            n += 8
        if self.rotations:
            n += 360 // self.rotation_step - 1
        return n


FULL_FAMILY = AugmentSpec()


def flip_x(img: np.ndarray) -> np.ndarray:
    """Mirror across the horizontal axis (top row becomes bottom row)."""
    return img[::-1, :].copy()


def flip_y(img: np.ndarray) -> np.ndarray:
    """Mirror across the vertical axis (left column becomes right column)."""
    return img[:, ::-1].copy()


def flip_both(img: np.ndarray) -> np.ndarray:
    return img[::-1, ::-1].copy()


def shift(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate by dx columns and dy rows, filling vacated pixels with 0."""
    out = np.zeros_like(img)
    rows, cols = img.shape
    if abs(dy) >= rows or abs(dx) >= cols:
        return out
    src_r = slice(max(-dy, 0), rows - max(dy, 0))
    dst_r = slice(max(dy, 0), rows - max(-dy, 0))
    src_c = slice(max(-dx, 0), cols - max(dx, 0))
    dst_c = slice(max(dx, 0), cols - max(-dx, 0))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate a square image counter-clockwise about its center.

    Multiples of 90 degrees are exact permutations; other angles sample the
    source through the inverse rotation with bilinear interpolation and
    zero outside the image.
    """
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise NonSquareRotation(f"rotation needs a square image, got {img.shape}")
    degrees = float(degrees) % 360.0
    if degrees == 0.0:
        return img.copy()
    if degrees in (90.0, 180.0, 270.0):
        return np.rot90(img, k=int(degrees // 90)).copy()

    n = img.shape[0]
    center = (n - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    rows_o, cols_o = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    x_o = cols_o - center
    y_o = rows_o - center
    src_col = cos_t * x_o - sin_t * y_o + center
    src_row = sin_t * x_o + cos_t * y_o + center

    r0 = np.floor(src_row).astype(np.int64)
    c0 = np.floor(src_col).astype(np.int64)
    fr = src_row - r0
    fc = src_col - c0

    work = img.astype(np.float64, copy=False)
    acc = np.zeros((n, n), dtype=np.float64)
    for dr, dc, weight in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        inside = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n)
        vals = work[np.clip(rr, 0, n - 1), np.clip(cc, 0, n - 1)]
        acc += weight * np.where(inside, vals, 0.0)
    return acc.astype(img.dtype, copy=False)


def shift_offsets(magnitude: int) -> list[tuple[int, int]]:
    """The eight (dx, dy) shift pairs, in deterministic enumeration order."""
    steps = (-magnitude, 0, magnitude)
    return [(dx, dy) for dx in steps for dy in steps if (dx, dy) != (0, 0)]


def rotation_angles(step: int) -> list[int]:
    return list(range(step, 360, step))


def augment_image(img: np.ndarray, spec: AugmentSpec = FULL_FAMILY) -> list[np.ndarray]:
    """Expand one image into its augmentation family, the original first.

    Output order is fixed: original, flips (x, y, both), shifts in
    shift_offsets order, rotations by ascending angle.
    """
    if img.ndim != 2:
        raise AugmentError("expected a 2-D image")
    if spec.rotations and img.shape[0] != img.shape[1]:
        raise NonSquareRotation(f"rotation needs a square image, got {img.shape}")
    out = [img.copy()]
    if spec.flips:
        out += [flip_x(img), flip_y(img), flip_both(img)]
    if spec.shifts:
        out += [shift(img, dx, dy) for dx, dy in shift_offsets(spec.shift_magnitude)]
    if spec.rotations:
        out += [rotate(img, a) for a in rotation_angles(spec.rotation_step)]
    return out
