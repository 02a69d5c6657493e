"""Synthetic chest CT generator with ground-truth tamper annotations.

Each phantom patient is a stack of slices holding a soft-tissue body
ellipse and two textured lung fields. A quarter of the patients get an
injected lesion (FM), a quarter get a tamper site without a lesion (FB),
and the rest are untampered; half of the untampered patients carry a
natural lesion so that lesion presence alone cannot separate the classes.
Tampered sites additionally suppress the local high-frequency texture by
an amount scaled with ``tamper_signature_strength``, which is the
learnable fingerprint. Output is ordinary DICOM folders plus the
annotation CSV and cohort manifest, so the generator exercises exactly
the ingestion surface real data would.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import Annotation, CohortManifest, Label, ManifestEntry, Tag, Trial, write_annotations
from .dicomio import DicomSlice, ScanVolume, write_slice

BODY_HU = 40.0
LUNG_HU = -800.0
AIR_HU = -1000.0
# fraction of local high-frequency texture removed at strength 1
FINGERPRINT_DEPTH = 0.95
FOOTPRINT_RADIUS_PX = 36.0


class PhantomError(Exception):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    n_patients: int = 20
    slices_per_patient: int = 5
    dims: tuple[int, int] = (512, 512)
    lesion_radius_px: tuple[float, float] = (7.0, 12.0)
    lesion_contrast_hu: tuple[float, float] = (250.0, 450.0)
    tamper_signature_strength: float = 1.0

    def __post_init__(self):
        if self.seed < 0:
            raise PhantomError("seed must be non-negative")
        if self.n_patients < 1 or self.slices_per_patient < 1:
            raise PhantomError("need at least one patient and one slice")
        rows, cols = self.dims
        if rows < 64 or cols < 64:
            raise PhantomError("dims must be at least 64x64 to fit the anatomy")
        lo, hi = self.lesion_radius_px
        if not 0 < lo <= hi:
            raise PhantomError("lesion radius range must be positive and ordered")
        lo, hi = self.lesion_contrast_hu
        if lo > hi:
            raise PhantomError("lesion contrast range must be ordered")
        if not 0.0 <= self.tamper_signature_strength <= 1.0:
            raise PhantomError("tamper_signature_strength must lie in [0, 1]")


def patient_roles(spec: PhantomSpec) -> list[tuple[Label, bool]]:
    """(label, has_natural_lesion) per patient index.

    First quarter FM, second quarter FB, remainder untampered with natural
    lesions on alternating patients.
    """
    n = spec.n_patients
    quarter = n // 4
    roles = []
    for idx in range(n):
        if idx < quarter:
            roles.append((Label.FM, False))
        elif idx < 2 * quarter:
            roles.append((Label.FB, False))
        else:
            roles.append((Label.UNTAMPERED, (idx - 2 * quarter) % 2 == 0))
    return roles


def patient_trials(spec: PhantomSpec) -> list[Trial]:
    """One open-trial patient per five in each tampered class, rest blind."""
    roles = patient_roles(spec)
    trials = []
    for label in (Label.FM, Label.FB):
        members = [i for i, (lab, _) in enumerate(roles) if lab is label]
        n_open = max(1, len(members) // 5) if members else 0
        for pos, idx in enumerate(members):
            trials.append((idx, Trial.OPEN if pos < n_open else Trial.BLIND))
    out = [Trial.NA] * spec.n_patients
    for idx, trial in trials:
        out[idx] = trial
    return out


@dataclass(frozen=True)
class _PatientPlan:
    lesion_slice: int
    lesion_lung: int
    lesion_offset: tuple[float, float]
    lesion_radius: float
    lesion_contrast: float


def _patient_plan(spec: PhantomSpec, idx: int) -> _PatientPlan:
    # one fixed draw order per patient; the plan is recomputable without
    # touching the per-slice texture streams. Anatomy is deliberately
    # standardized: outline pixels would otherwise double as
    # patient-identity markers that a greedy tree prefers over the
    # in-lung texture signal. Patients differ in lesion placement, size,
    # contrast, and texture realization.
    rng = np.random.default_rng(spec.seed ^ idx)
    s = spec.slices_per_patient
    lesion_slice = int(rng.integers(s // 4, max(s // 4 + 1, s - s // 4)))
    # alternate lungs by patient index: a random draw can leave one lung
    # side underrepresented in small cohorts
    lesion_lung = idx % 2
    # offsets are absolute pixels, not fractions of the lung axes: the
    # tamper footprints of different patients must overlap in canvas
    # coordinates
    angle = float(rng.uniform(0.0, 2 * np.pi))
    radial = 5.0 * np.sqrt(float(rng.uniform(0.0, 1.0)))
    lesion_offset = (radial * np.sin(angle), radial * np.cos(angle))
    lo, hi = spec.lesion_radius_px
    lesion_radius = float(rng.uniform(lo, hi))
    lo, hi = spec.lesion_contrast_hu
    lesion_contrast = float(rng.uniform(lo, hi))
    return _PatientPlan(
        lesion_slice=lesion_slice,
        lesion_lung=lesion_lung,
        lesion_offset=lesion_offset,
        lesion_radius=lesion_radius,
        lesion_contrast=lesion_contrast,
    )


def _ellipse_mask(shape, center, semi) -> np.ndarray:
    rr, cc = np.ogrid[: shape[0], : shape[1]]
    return ((rr - center[0]) / semi[0]) ** 2 + ((cc - center[1]) / semi[1]) ** 2 <= 1.0


def _body_geometry(spec: PhantomSpec, plan: _PatientPlan, k: int):
    # geometry is constant across slices and patients: slice- or
    # patient-dependent organ outlines would let per-pixel learners key
    # on silhouettes instead of the tamper signature
    rows, cols = spec.dims
    body_center = (rows / 2.0, cols / 2.0)
    body_semi = (0.42 * rows, 0.44 * cols)
    lung_semi = (0.28 * rows, 0.16 * cols)
    lung_centers = ((rows * 0.5, cols * 0.32), (rows * 0.5, cols * 0.68))
    return body_center, body_semi, lung_centers, lung_semi


def lung_mask(spec: PhantomSpec, patient_index: int, slice_index: int) -> np.ndarray:
    """Boolean mask of both lung fields for one generated slice."""
    plan = _patient_plan(spec, patient_index)
    _, _, lung_centers, lung_semi = _body_geometry(spec, plan, slice_index)
    mask = np.zeros(spec.dims, dtype=bool)
    for center in lung_centers:
        mask |= _ellipse_mask(spec.dims, center, lung_semi)
    return mask


def lesion_site(spec: PhantomSpec, patient_index: int) -> tuple[int, int, int]:
    """(slice_index, x, y) of the annotated site for one patient."""
    plan = _patient_plan(spec, patient_index)
    _, _, lung_centers, lung_semi = _body_geometry(spec, plan, plan.lesion_slice)
    center = lung_centers[plan.lesion_lung]
    row = center[0] + plan.lesion_offset[0]
    col = center[1] + plan.lesion_offset[1]
    return plan.lesion_slice, int(round(col)), int(round(row))


def _bilinear_upsample(coarse: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    rows, cols = shape
    gr, gc = coarse.shape[0] - 1, coarse.shape[1] - 1
    r = np.linspace(0.0, gr, rows)
    c = np.linspace(0.0, gc, cols)
    r0 = np.minimum(np.floor(r).astype(int), gr - 1)
    c0 = np.minimum(np.floor(c).astype(int), gc - 1)
    fr = (r - r0)[:, None]
    fc = (c - c0)[None, :]
    return (
        coarse[np.ix_(r0, c0)] * (1 - fr) * (1 - fc)
        + coarse[np.ix_(r0 + 1, c0)] * fr * (1 - fc)
        + coarse[np.ix_(r0, c0 + 1)] * (1 - fr) * fc
        + coarse[np.ix_(r0 + 1, c0 + 1)] * fr * fc
    )


def _lung_texture(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """High-band value noise for lung interiors, roughly unit scale.

    Deliberately mean-free per patient: a smooth per-patient offset would
    act as a random intercept that nothing can learn from a small cohort,
    and the tamper fingerprint (variance suppression of exactly this
    texture) must stay comparable across patients.
    """
    return _bilinear_upsample(rng.standard_normal((69, 69)), shape)


def _slice_hu(spec: PhantomSpec, idx: int, k: int) -> np.ndarray:
    plan = _patient_plan(spec, idx)
    label, natural = patient_roles(spec)[idx]
    body_center, body_semi, lung_centers, lung_semi = _body_geometry(spec, plan, k)
    rows, cols = spec.dims

    rng = np.random.default_rng((spec.seed ^ idx, k))
    hu = np.full(spec.dims, AIR_HU)
    body = _ellipse_mask(spec.dims, body_center, body_semi)
    # tissue noise must be fine-grained for the same reason the lung high
    # band is: coarse per-patient fields double as identity fingerprints
    tissue = BODY_HU + 12.0 * _bilinear_upsample(rng.standard_normal((69, 69)), spec.dims)
    hu[body] = tissue[body]

    lungs = np.zeros(spec.dims, dtype=bool)
    for center in lung_centers:
        lungs |= _ellipse_mask(spec.dims, center, lung_semi)
    band_high = _lung_texture(rng, spec.dims)

    site_center = lung_centers[plan.lesion_lung]
    site_row = site_center[0] + plan.lesion_offset[0]
    site_col = site_center[1] + plan.lesion_offset[1]
    rr, cc = np.ogrid[:rows, :cols]
    dist_sq = (rr - site_row) ** 2 + (cc - site_col) ** 2

    on_site_slice = k == plan.lesion_slice
    if on_site_slice and label in (Label.FM, Label.FB):
        # plateau-shaped footprint with a fixed radius: the tampering patch
        # has one size regardless of how large the lesion inside it is
        weight = np.exp(-((dist_sq / FOOTPRINT_RADIUS_PX**2) ** 4))
        damping = 1.0 - FINGERPRINT_DEPTH * spec.tamper_signature_strength * weight
        band_high = band_high * damping
    texture = 96.0 * band_high
    hu[lungs] = LUNG_HU + texture[lungs]

    wants_lesion = label is Label.FM or (label is Label.UNTAMPERED and natural)
    if on_site_slice and wants_lesion:
        sigma_l = plan.lesion_radius / 2.0
        hu = hu + plan.lesion_contrast * np.exp(-dist_sq / (2.0 * sigma_l**2)) * lungs
    return hu


def _stored_slice(spec: PhantomSpec, idx: int, k: int) -> DicomSlice:
    hu = _slice_hu(spec, idx, k)
    stored = np.clip(np.rint(hu), -1024, 3071).astype(np.int64) + 1024
    return DicomSlice(
        patient_id=f"PH{idx:03d}",
        instance_number=k + 1,
        rows=spec.dims[0],
        cols=spec.dims[1],
        pixel_representation=1,
        rescale_slope=1.0,
        rescale_intercept=-1024.0,
        stored_pixels=stored.astype(np.int16),
        slice_location=2.5 * k,
    )


def generate(spec: PhantomSpec) -> tuple[list[ScanVolume], list[Annotation], CohortManifest]:
    """Build the whole cohort in memory: volumes, annotations, manifest."""
    roles = patient_roles(spec)
    trials = patient_trials(spec)
    volumes = []
    annotations = []
    entries = []
    for idx in range(spec.n_patients):
        pid = f"PH{idx:03d}"
        slices = tuple(_stored_slice(spec, idx, k) for k in range(spec.slices_per_patient))
        volumes.append(ScanVolume(patient_id=pid, slices=slices))
        label, _ = roles[idx]
        slice_index, x, y = lesion_site(spec, idx)
        tag = {Label.FM: Tag.FM, Label.FB: Tag.FB, Label.UNTAMPERED: Tag.NODULE}[label]
        annotations.append(
            Annotation(patient_id=pid, slice_index=slice_index, x=x, y=y, tag=tag)
        )
        entries.append(
            ManifestEntry(
                patient_id=pid,
                directory=pid,
                trial=trials[idx],
                label=label.value,
            )
        )
    manifest = CohortManifest(root=Path("."), entries=tuple(entries))
    return volumes, annotations, manifest


def write_corpus(spec: PhantomSpec, root: str | Path) -> Path:
    """Write the cohort to disk as DICOM folders + annotations.csv + manifest.json."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    volumes, annotations, manifest = generate(spec)
    for volume in volumes:
        patient_dir = root / volume.patient_id
        patient_dir.mkdir(exist_ok=True)
        for s in volume.slices:
            name = f"slice_{s.instance_number - 1:03d}.dcm"
            (patient_dir / name).write_bytes(write_slice(s))
    write_annotations(root / "annotations.csv", annotations)
    doc = {
        "schema_version": 1,
        "patients": [
            {
                "patient_id": e.patient_id,
                "directory": e.directory,
                "trial": e.trial.value,
                "label": e.label,
            }
            for e in manifest.entries
        ],
    }
    (root / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return root
