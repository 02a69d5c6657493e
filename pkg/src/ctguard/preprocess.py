"""Slice preprocessing: HU calibration, windowing, and the three spatial regimes.

A regime turns one decoded slice plus an annotated site into a fixed-shape
float image: RAW keeps the full grid, LOCALIZED crops a square around the
site, NEGSPACE trims the empty border around the body and refits to a fixed
canvas.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .dicomio import DicomSlice

DEFAULT_WINDOW = (-1000.0, 400.0)
DEFAULT_CROP_SIZE = 128
DEFAULT_CANVAS = (266, 340)
DEFAULT_BODY_THRESHOLD = 0.05

TENSOR_MAGIC = b"CTTB"
TENSOR_VERSION = 1
_ENDIAN_PROBE = 0x01020304


class PreprocessError(Exception):
    pass


class SizeExceedsImage(PreprocessError):
    """Requested crop does not fit inside the slice."""


class EmptyForeground(PreprocessError):
    """No pixel above the body threshold; nothing to box."""


class RegimeKind(str, Enum):
    RAW = "RAW"
    LOCALIZED = "LOCALIZED"
    NEGSPACE = "NEGSPACE"


@dataclass(frozen=True)
class PreprocessRegime:
    kind: RegimeKind
    window_low: float = DEFAULT_WINDOW[0]
    window_high: float = DEFAULT_WINDOW[1]
    crop_size: int = DEFAULT_CROP_SIZE
    canvas: tuple[int, int] = DEFAULT_CANVAS
    body_threshold: float = DEFAULT_BODY_THRESHOLD

    def __post_init__(self):
        if self.window_low >= self.window_high:
            raise ValueError("window_low must be below window_high")
        if self.crop_size < 8 or self.crop_size % 2:
            raise ValueError("crop_size must be even and >= 8")
        if len(self.canvas) != 2 or min(self.canvas) < 1:
            raise ValueError("canvas must be (rows, cols) with positive dims")
        object.__setattr__(self, "canvas", (int(self.canvas[0]), int(self.canvas[1])))

    def fingerprint(self) -> str:
        payload = {
            "kind": self.kind.value,
            "window": [self.window_low, self.window_high],
            "crop_size": self.crop_size,
            "canvas": list(self.canvas),
            "body_threshold": self.body_threshold,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def output_shape(self, slice_shape: tuple[int, int]) -> tuple[int, int]:
        if self.kind is RegimeKind.RAW:
            return slice_shape
        if self.kind is RegimeKind.LOCALIZED:
            return (self.crop_size, self.crop_size)
        return self.canvas


def to_hu(s: DicomSlice) -> np.ndarray:
    """Stored values to Hounsfield units via the slice's rescale pair."""
    return s.rescale_slope * s.stored_pixels.astype(np.float64) + s.rescale_intercept


def normalize(hu: np.ndarray, low: float = DEFAULT_WINDOW[0], high: float = DEFAULT_WINDOW[1]) -> np.ndarray:
    """Affine-map [low, high] HU onto [0, 1], clamping outside values."""
    if low >= high:
        raise ValueError("window low must be below high")
    return np.clip((np.asarray(hu, dtype=np.float64) - low) / (high - low), 0.0, 1.0)


def localize(img: np.ndarray, center_x: int, center_y: int, size: int = DEFAULT_CROP_SIZE) -> np.ndarray:
    """Cut a size x size window centered on (center_x, center_y).

    Windows that would overhang the border are translated back inside, so
    the output is always exactly size x size with no fill pixels.
    """
    rows, cols = img.shape
    if size > rows or size > cols:
        raise SizeExceedsImage(f"crop {size} exceeds image {rows}x{cols}")
    half = size // 2
    r0 = min(max(center_y - half, 0), rows - size)
    c0 = min(max(center_x - half, 0), cols - size)
    return img[r0 : r0 + size, c0 : c0 + size]


def _fit_axis(length: int, target: int) -> tuple[int, int, int, int]:
    # Returns (src_start, src_stop, dst_start, dst_stop) for one axis.
    if length >= target:
        start = (length - target) // 2
        return start, start + target, 0, target
    pad = (target - length) // 2
    return 0, length, pad, pad + length


def reduce_negative_space(
    img: np.ndarray,
    canvas: tuple[int, int] = DEFAULT_CANVAS,
    body_threshold: float = DEFAULT_BODY_THRESHOLD,
) -> np.ndarray:
    """Trim the zeroed border around the body, then center-fit to canvas.

    The tight bounding box of pixels above body_threshold is cut out and
    centered on a canvas of zeros; boxes larger than the canvas are
    center-cropped instead.
    """
    mask = img > body_threshold
    if not mask.any():
        raise EmptyForeground(f"no pixel above {body_threshold}")
    row_hits = np.flatnonzero(mask.any(axis=1))
    col_hits = np.flatnonzero(mask.any(axis=0))
    box = img[row_hits[0] : row_hits[-1] + 1, col_hits[0] : col_hits[-1] + 1]

    out = np.zeros(canvas, dtype=img.dtype)
    rs0, rs1, rd0, rd1 = _fit_axis(box.shape[0], canvas[0])
    cs0, cs1, cd0, cd1 = _fit_axis(box.shape[1], canvas[1])
    out[rd0:rd1, cd0:cd1] = box[rs0:rs1, cs0:cs1]
    return out


def flatten(img: np.ndarray) -> np.ndarray:
    """Row-major 1-D copy."""
    return np.ravel(img, order="C").copy()


def apply_regime(
    s: DicomSlice,
    center_x: int,
    center_y: int,
    regime: PreprocessRegime,
) -> np.ndarray:
    """Full pipeline for one slice: HU, window-normalize, spatial regime."""
    img = normalize(to_hu(s), regime.window_low, regime.window_high)
    if regime.kind is RegimeKind.LOCALIZED:
        img = localize(img, center_x, center_y, regime.crop_size)
    elif regime.kind is RegimeKind.NEGSPACE:
        img = reduce_negative_space(img, regime.canvas, regime.body_threshold)
    return img.astype(np.float32)


def save_tensor(path: str | Path, array: np.ndarray, fingerprint: str) -> None:
    """Write a float32 little-endian tensor blob tagged with a regime fingerprint."""
    array = np.ascontiguousarray(array, dtype="<f4")
    fp = fingerprint.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<HI", TENSOR_VERSION, _ENDIAN_PROBE))
        fh.write(struct.pack("<H", len(fp)))
        fh.write(fp)
        fh.write(struct.pack("<B", array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_tensor(path: str | Path) -> tuple[np.ndarray, str]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TENSOR_MAGIC:
        raise ValueError("not a tensor blob")
    version, probe = struct.unpack_from("<HI", blob, 4)
    if version != TENSOR_VERSION or probe != _ENDIAN_PROBE:
        raise ValueError(f"unsupported tensor blob version {version}")
    (fp_len,) = struct.unpack_from("<H", blob, 10)
    fingerprint = blob[12 : 12 + fp_len].decode("ascii")
    pos = 12 + fp_len
    (ndim,) = struct.unpack_from("<B", blob, pos)
    dims = struct.unpack_from(f"<{ndim}I", blob, pos + 1)
    data = np.frombuffer(blob, dtype="<f4", offset=pos + 1 + 4 * ndim).reshape(dims)
    return data.copy(), fingerprint
