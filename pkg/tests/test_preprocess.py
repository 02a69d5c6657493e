from __future__ import annotations

import numpy as np
import pytest

from ctguard.preprocess import (
    EmptyForeground,
    PreprocessRegime,
    RegimeKind,
    SizeExceedsImage,
    apply_regime,
    flatten,
    load_tensor,
    localize,
    normalize,
    reduce_negative_space,
    save_tensor,
    to_hu,
)


def test_to_hu_applies_rescale_pair(make_slice):
    rng = np.random.default_rng(0)
    s = make_slice(rng, rows=4, cols=4)
    hu = to_hu(s)
    assert hu.dtype == np.float64
    expect = s.rescale_slope * float(s.stored_pixels[2, 1]) + s.rescale_intercept
    assert hu[2, 1] == pytest.approx(expect)


def test_normalize_window_endpoints_and_clamp():
    hu = np.array([[-2000.0, -1000.0], [400.0, 1500.0]])
    out = normalize(hu, -1000.0, 400.0)
    assert out.tolist() == [[0.0, 0.0], [1.0, 1.0]]
    mid = normalize(np.array([[-300.0]]), -1000.0, 400.0)
    assert mid[0, 0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        normalize(hu, 400.0, -1000.0)


def test_normalize_is_monotone():
    rng = np.random.default_rng(1)
    values = np.sort(rng.uniform(-3000, 3000, size=200))
    out = normalize(values)
    assert (np.diff(out) >= 0).all()


def test_localize_centered_window():
    img = np.arange(512 * 512, dtype=np.float64).reshape(512, 512)
    win = localize(img, 256, 256, 128)
    assert win.shape == (128, 128)
    # window spans rows and cols 192..320
    assert win[0, 0] == img[192, 192]
    assert win[-1, -1] == img[319, 319]


def test_localize_clamps_at_borders():
    img = np.arange(64 * 64, dtype=np.float64).reshape(64, 64)
    win = localize(img, 2, 3, 16)
    assert win[0, 0] == img[0, 0]
    win = localize(img, 63, 63, 16)
    assert win[-1, -1] == img[63, 63]


def test_localize_never_pads_reference_comparison():
    # Oracle: independent clamp arithmetic, checked over many random draws.
    rng = np.random.default_rng(2)
    for _ in range(1000):
        rows = int(rng.integers(16, 70))
        cols = int(rng.integers(16, 70))
        size = int(rng.integers(4, min(rows, cols) // 2 + 1)) * 2
        img = rng.normal(size=(rows, cols))
        cx = int(rng.integers(-5, cols + 5))
        cy = int(rng.integers(-5, rows + 5))
        win = localize(img, cx, cy, size)
        r0 = cy - size // 2
        r0 = 0 if r0 < 0 else min(r0, rows - size)
        c0 = cx - size // 2
        c0 = 0 if c0 < 0 else min(c0, cols - size)
        assert win.shape == (size, size)
        assert np.array_equal(win, img[r0 : r0 + size, c0 : c0 + size])


def test_localize_size_exceeding_image():
    img = np.zeros((64, 100))
    with pytest.raises(SizeExceedsImage):
        localize(img, 10, 10, 66)


def brute_bbox(img, thr):
    rows, cols = img.shape
    rmin, rmax, cmin, cmax = None, None, None, None
    for r in range(rows):
        for c in range(cols):
            if img[r, c] > thr:
                rmin = r if rmin is None else rmin
                rmax = r
                cmin = c if cmin is None or c < cmin else cmin
                cmax = c if cmax is None or c > cmax else cmax
    return rmin, rmax, cmin, cmax


def test_reduce_negative_space_tight_box_centered():
    img = np.zeros((40, 50))
    img[10:20, 5:30] = 0.8  # 10 x 25 body
    out = reduce_negative_space(img, canvas=(20, 31))
    assert out.shape == (20, 31)
    # 10 rows into 20 -> 5 rows of padding each side; 25 cols into 31 -> 3 each side
    assert out[4, :].sum() == 0 and out[15, :].sum() == 0
    assert np.all(out[5:15, 3:28] == 0.8)


def test_reduce_negative_space_crops_oversize_box():
    img = np.zeros((40, 40))
    img[2:38, 4:36] = 1.0  # 36 x 32 body
    out = reduce_negative_space(img, canvas=(10, 10))
    assert out.shape == (10, 10)
    assert np.all(out == 1.0)


def test_reduce_negative_space_odd_difference_goes_down_right():
    img = np.zeros((9, 9))
    img[4, 4] = 1.0  # 1x1 box into even canvas: pad splits 1 short at top-left
    out = reduce_negative_space(img, canvas=(4, 4))
    assert out[1, 1] == 1.0
    assert out.sum() == 1.0


def test_reduce_negative_space_matches_brute_force_bbox():
    rng = np.random.default_rng(3)
    for _ in range(50):
        img = (rng.uniform(size=(15, 18)) > 0.8).astype(np.float64) * rng.uniform(0.1, 1.0)
        if not (img > 0.05).any():
            continue
        rmin, rmax, cmin, cmax = brute_bbox(img, 0.05)
        box = img[rmin : rmax + 1, cmin : cmax + 1]
        out = reduce_negative_space(img, canvas=box.shape)
        assert np.array_equal(out, box)


def test_reduce_negative_space_empty_foreground():
    with pytest.raises(EmptyForeground):
        reduce_negative_space(np.zeros((10, 10)), canvas=(4, 4))
    with pytest.raises(EmptyForeground):
        reduce_negative_space(np.full((10, 10), 0.05), canvas=(4, 4))  # strict >


def test_flatten_row_major():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert flatten(img).tolist() == [1.0, 2.0, 3.0, 4.0]
    big = np.zeros((266, 340))
    assert flatten(big).shape == (90440,)


def test_regime_validation():
    with pytest.raises(ValueError):
        PreprocessRegime(kind=RegimeKind.LOCALIZED, crop_size=7)
    with pytest.raises(ValueError):
        PreprocessRegime(kind=RegimeKind.LOCALIZED, crop_size=6)
    with pytest.raises(ValueError):
        PreprocessRegime(kind=RegimeKind.RAW, window_low=10.0, window_high=-10.0)
    r = PreprocessRegime(kind=RegimeKind.NEGSPACE)
    assert r.canvas == (266, 340)
    assert r.output_shape((512, 512)) == (266, 340)
    assert PreprocessRegime(kind=RegimeKind.LOCALIZED).output_shape((512, 512)) == (128, 128)
    assert PreprocessRegime(kind=RegimeKind.RAW).output_shape((512, 512)) == (512, 512)


def test_regime_fingerprint_tracks_fields():
    a = PreprocessRegime(kind=RegimeKind.LOCALIZED)
    b = PreprocessRegime(kind=RegimeKind.LOCALIZED, crop_size=64)
    c = PreprocessRegime(kind=RegimeKind.LOCALIZED)
    assert a.fingerprint() == c.fingerprint()
    assert a.fingerprint() != b.fingerprint()


def test_apply_regime_shapes(make_slice):
    rng = np.random.default_rng(4)
    s = make_slice(rng, rows=64, cols=64, signed=True)
    raw = apply_regime(s, 10, 10, PreprocessRegime(kind=RegimeKind.RAW))
    assert raw.shape == (64, 64) and raw.dtype == np.float32
    loc = apply_regime(s, 10, 10, PreprocessRegime(kind=RegimeKind.LOCALIZED, crop_size=16))
    assert loc.shape == (16, 16)
    assert float(raw.min()) >= 0.0 and float(raw.max()) <= 1.0


def test_tensor_blob_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    arr = rng.normal(size=(7, 11, 13)).astype(np.float32)
    path = tmp_path / "t.ctb"
    save_tensor(path, arr, "abc123")
    back, fp = load_tensor(path)
    assert fp == "abc123"
    assert np.array_equal(back, arr)
    (tmp_path / "junk.ctb").write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "junk.ctb")
