from __future__ import annotations

import numpy as np
import pytest

from ctguard.dicomio import DicomSlice


def _random_slice(
    rng: np.random.Generator,
    *,
    patient_id: str = "P1",
    instance_number: int | None = None,
    rows: int = 8,
    cols: int = 8,
    signed: bool | None = None,
    with_location: bool = True,
) -> DicomSlice:
    if signed is None:
        signed = bool(rng.integers(0, 2))
    if signed:
        pixels = rng.integers(-32768, 32768, size=(rows, cols), dtype=np.int16)
    else:
        pixels = rng.integers(0, 65536, size=(rows, cols), dtype=np.uint16)
    return DicomSlice(
        patient_id=patient_id,
        instance_number=int(rng.integers(0, 500)) if instance_number is None else instance_number,
        rows=rows,
        cols=cols,
        pixel_representation=1 if signed else 0,
        rescale_slope=float(round(rng.uniform(0.5, 2.0), 4)),
        rescale_intercept=float(round(rng.uniform(-2000.0, 0.0), 4)),
        stored_pixels=pixels,
        slice_location=float(round(rng.uniform(-300.0, 300.0), 2)) if with_location else None,
    )


@pytest.fixture
def make_slice():
    return _random_slice
