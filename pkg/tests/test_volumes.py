import json

import numpy as np
import pytest

from cardiseg.errors import (
    BoundsError,
    ConfigError,
    FormatError,
    IntegrityError,
    StateError,
)
from cardiseg.volumes import (
    LabelMap,
    PreprocessSettings,
    Volume,
    gaussian_kernel_1d,
    normalize,
    read_labelmap,
    read_volume,
    resample,
    roi_mean,
    smooth_axial,
    write_volume,
)


def make_volume(data, spacing=(1.0, 1.0, 1.0), **kw):
    return Volume(np.asarray(data), spacing=spacing, **kw)


# ---------------------------------------------------------------------------
# Native format
# ---------------------------------------------------------------------------


def test_native_round_trip_constant(tmp_path):
    v = make_volume(np.full((4, 4, 4), 100, dtype=np.int16))
    write_volume(v, tmp_path / "c.vol")
    r = read_volume(tmp_path / "c.vol")
    assert r.shape == (4, 4, 4)
    assert np.all(r.data == 100)
    assert r.data.size == 64


def test_native_write_read_write_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    v = make_volume(
        rng.integers(-500, 500, size=(5, 6, 7)).astype(np.int16),
        spacing=(0.7, 0.9, 1.3),
    )
    write_volume(v, tmp_path / "a.vol")
    r = read_volume(tmp_path / "a.vol")
    write_volume(r, tmp_path / "b.vol")
    assert (tmp_path / "a.vol").read_bytes() == (tmp_path / "b.vol").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_native_single_voxel_float_payload(tmp_path):
    v = make_volume(np.zeros((1, 1, 1), dtype=np.float32))
    write_volume(v, tmp_path / "one.vol")
    assert (tmp_path / "one.vol").stat().st_size == 4
    meta = json.loads((tmp_path / "one.json").read_text())
    assert meta["shape"] == [1, 1, 1]


def test_native_round_trip_preserves_spacing(tmp_path):
    v = make_volume(np.zeros((2, 2, 2), dtype=np.int16), spacing=(0.123456789, 1.0, 2.5))
    write_volume(v, tmp_path / "s.vol")
    r = read_volume(tmp_path / "s.vol")
    assert all(abs(a - b) < 1e-9 for a, b in zip(r.spacing, v.spacing))


def test_native_round_trip_random_int16_exact(tmp_path):
    rng = np.random.default_rng(0)
    v = make_volume(rng.integers(-1024, 3071, size=(8, 8, 8)).astype(np.int16))
    write_volume(v, tmp_path / "r.vol")
    r = read_volume(tmp_path / "r.vol")
    assert np.array_equal(r.data, v.data)
    assert r.data.dtype == np.int16


def test_native_payload_order_z_major_x_fastest(tmp_path):
    x, y, z = np.meshgrid(np.arange(2), np.arange(2), np.arange(2), indexing="ij")
    v = make_volume((x + 10 * y + 100 * z).astype(np.int16))
    write_volume(v, tmp_path / "o.vol")
    seq = np.frombuffer((tmp_path / "o.vol").read_bytes(), dtype="<i2")
    assert seq.tolist() == [0, 1, 10, 11, 100, 101, 110, 111]


def test_native_size_mismatch_is_integrity_error(tmp_path):
    v = make_volume(np.zeros((3, 3, 3), dtype=np.int16))
    write_volume(v, tmp_path / "m.vol")
    (tmp_path / "m.vol").write_bytes(b"\x00" * 10)
    with pytest.raises(IntegrityError):
        read_volume(tmp_path / "m.vol")


def test_native_malformed_sidecar_is_format_error(tmp_path):
    v = make_volume(np.zeros((2, 2, 2), dtype=np.int16))
    write_volume(v, tmp_path / "bad.vol")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(FormatError):
        read_volume(tmp_path / "bad.vol")


def test_labelmap_round_trip_uses_uint8(tmp_path):
    lm = LabelMap(np.arange(8, dtype=np.uint8).reshape(2, 2, 2), spacing=(1, 1, 1))
    write_volume(lm, tmp_path / "lab.vol")
    meta = json.loads((tmp_path / "lab.json").read_text())
    assert meta["dtype"] == "uint8" and meta["kind"] == "labels"
    r = read_labelmap(tmp_path / "lab.vol")
    assert np.array_equal(r.data, lm.data)
    with pytest.raises(FormatError):
        read_volume(tmp_path / "lab.vol")


def test_labelmap_rejects_out_of_schema_values():
    with pytest.raises(ConfigError):
        LabelMap(np.full((2, 2, 2), 9, dtype=np.uint8), spacing=(1, 1, 1))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def test_resample_identity():
    rng = np.random.default_rng(1)
    v = make_volume(rng.normal(size=(6, 5, 4)).astype(np.float32), spacing=(0.8, 0.8, 0.8))
    r = resample(v, (0.8, 0.8, 0.8))
    assert r.shape == v.shape
    assert np.array_equal(r.data, v.data)
    assert r.spacing == v.spacing and r.origin == v.origin


def test_resample_exact_on_linear_field():
    nx, ny, nz = 12, 5, 5
    x = np.arange(nx) * 2.0
    v = make_volume(
        np.broadcast_to(x[:, None, None], (nx, ny, nz)).astype(np.float32),
        spacing=(2.0, 2.0, 2.0),
    )
    r = resample(v, (0.8, 0.8, 0.8))
    xs = np.arange(r.shape[0]) * 0.8
    interior = xs <= (nx - 1) * 2.0
    expect = np.broadcast_to(xs[:, None, None], r.shape)
    assert np.max(np.abs(r.data[interior] - expect[interior])) < 1e-6


def test_resample_labels_nearest_oracle():
    rng = np.random.default_rng(2)
    lm = LabelMap((rng.random((9, 8, 7)) < 0.4).astype(np.uint8), spacing=(2.0, 2.0, 2.0))
    r = resample(lm, (0.8, 0.8, 0.8))
    assert set(np.unique(r.data)) <= {0, 1}
    # Oracle: nearest-neighbor lookup per output voxel, computed independently.
    for axis_idx in np.ndindex(r.shape):
        src = tuple(
            min(lm.shape[a] - 1, int(np.floor(axis_idx[a] * 0.8 / 2.0 + 0.5)))
            for a in range(3)
        )
        assert r.data[axis_idx] == lm.data[src]
    vol_in = lm.data.sum() * 8.0 / 1000.0  # mL at 2 mm
    vol_out = r.data.sum() * 0.8**3 / 1000.0
    # A one-voxel shell around the surface bounds the discretization change.
    surface = lm.data & ~_erode6(lm.data.astype(bool))
    shell_ml = surface.sum() * 8.0 / 1000.0
    assert abs(vol_out - vol_in) <= shell_ml


def _erode6(mask):
    out = mask.copy()
    for axis in range(3):
        for shift in (1, -1):
            shifted = np.zeros_like(mask)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if shift == 1:
                src[axis], dst[axis] = slice(0, -1), slice(1, None)
            else:
                src[axis], dst[axis] = slice(1, None), slice(0, -1)
            shifted[tuple(dst)] = mask[tuple(src)]
            out &= shifted
    return out


def test_resample_labels_never_invents_labels():
    rng = np.random.default_rng(3)
    data = rng.choice([0, 2, 5], size=(8, 8, 8), p=[0.5, 0.3, 0.2]).astype(np.uint8)
    lm = LabelMap(data, spacing=(1.5, 1.5, 1.5))
    r = resample(lm, (0.9, 1.1, 0.7))
    assert set(np.unique(r.data)) <= set(np.unique(data))


def test_resample_shape_rule():
    v = make_volume(np.zeros((10, 10, 10), dtype=np.float32), spacing=(2.0, 2.0, 2.0))
    r = resample(v, (0.8, 0.8, 0.8))
    assert r.shape == (25, 25, 25)  # ceil(10*2/0.8)


# ---------------------------------------------------------------------------
# Axial smoothing
# ---------------------------------------------------------------------------


def test_smooth_constant_unchanged():
    v = make_volume(np.full((8, 8, 3), 7.0, dtype=np.float32))
    s = smooth_axial(v, 2.0)
    assert np.allclose(s.data, 7.0, atol=1e-6)


def test_smooth_impulse_normalized_and_slicewise():
    v = make_volume(np.zeros((15, 15, 3), dtype=np.float32))
    v.data[7, 7, 1] = 1.0
    s = smooth_axial(v, 1.5)
    assert abs(s.data[:, :, 1].sum() - 1.0) < 1e-9
    assert np.all(s.data[:, :, 0] == 0.0)
    assert np.all(s.data[:, :, 2] == 0.0)


def test_smooth_matches_brute_force_2d_convolution():
    rng = np.random.default_rng(0)
    v = make_volume(rng.normal(size=(16, 16, 3)), spacing=(0.9, 1.2, 1.0))
    sigma = 1.7
    s = smooth_axial(v, sigma)
    kx = gaussian_kernel_1d(sigma / 0.9)
    ky = gaussian_kernel_1d(sigma / 1.2)
    rx, ry = (len(kx) - 1) // 2, (len(ky) - 1) // 2
    for z in range(3):
        sl = v.data[:, :, z].astype(np.float64)
        expect = np.zeros_like(sl)
        for i in range(16):
            for j in range(16):
                acc = 0.0
                for a, wa in enumerate(kx):
                    for b, wb in enumerate(ky):
                        ii = min(max(i + a - rx, 0), 15)  # edge replication
                        jj = min(max(j + b - ry, 0), 15)
                        acc += wa * wb * sl[ii, jj]
                expect[i, j] = acc
        assert np.max(np.abs(s.data[:, :, z] - expect)) < 1e-9


def test_smooth_linear_and_shift_equivariant():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(10, 10, 2))
    b = rng.normal(size=(10, 10, 2))
    sa = smooth_axial(make_volume(a), 1.0).data
    sb = smooth_axial(make_volume(b), 1.0).data
    s_sum = smooth_axial(make_volume(2.0 * a + b), 1.0).data
    assert np.allclose(s_sum, 2.0 * sa + sb, atol=1e-5)
    s_shift = smooth_axial(make_volume(a + 5.0), 1.0).data
    assert np.allclose(s_shift, sa + 5.0, atol=1e-5)


def test_smooth_negative_sigma_rejected():
    v = make_volume(np.zeros((4, 4, 1), dtype=np.float32))
    with pytest.raises(ConfigError):
        smooth_axial(v, -0.1)


def test_smooth_sigma_zero_is_identity():
    rng = np.random.default_rng(5)
    v = make_volume(rng.normal(size=(6, 6, 2)).astype(np.float32))
    assert np.array_equal(smooth_axial(v, 0.0).data, v.data)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def test_normalize_window_endpoints():
    v = make_volume(np.array([[[-1024.0, 3071.0]]], dtype=np.float32))
    n = normalize(v)
    assert n.data[0, 0, 0] == 0.0
    assert n.data[0, 0, 1] == 1.0
    assert n.intensity_kind == "normalized"


def test_normalize_zero_hu():
    v = make_volume(np.array([[[0.0]]], dtype=np.float32))
    n = normalize(v)
    assert abs(n.data[0, 0, 0] - 1024.0 / 4095.0) < 1e-7


def test_normalize_clamps():
    v = make_volume(np.array([[[5000.0, -2000.0]]], dtype=np.float32))
    n = normalize(v)
    assert n.data[0, 0, 0] == 1.0
    assert n.data[0, 0, 1] == 0.0


def test_normalize_twice_is_state_error():
    v = make_volume(np.zeros((2, 2, 2), dtype=np.float32))
    n = normalize(v)
    with pytest.raises(StateError):
        normalize(n)


def test_normalize_monotone():
    rng = np.random.default_rng(6)
    vals = np.sort(rng.uniform(-2000, 4000, size=64)).astype(np.float32)
    n = normalize(make_volume(vals.reshape(4, 4, 4)))
    flat = n.data.reshape(-1)
    assert np.all(np.diff(flat) >= 0)


def test_preprocess_settings_validation():
    with pytest.raises(ConfigError):
        PreprocessSettings(smooth_sigma_mm=-1)
    with pytest.raises(ConfigError):
        PreprocessSettings(target_spacing_mm=0)
    with pytest.raises(ConfigError):
        PreprocessSettings(hu_min=100, hu_max=0)


# ---------------------------------------------------------------------------
# ROI statistics
# ---------------------------------------------------------------------------


def test_roi_mean_constant():
    v = make_volume(np.full((20, 20, 3), 43.0, dtype=np.float32))
    r = roi_mean(v, center_mm=(9.5, 9.5, 1.0), side_mm=10.0)
    assert r["mean"] == 43.0 and r["sd"] == 0.0


def test_roi_mean_half_and_half():
    data = np.zeros((10, 10, 1), dtype=np.float32)
    data[5:, :, :] = 100.0
    v = make_volume(data)
    r = roi_mean(v, center_mm=(4.5, 4.5, 0.0), side_mm=10.0)
    assert r["mean"] == 50.0
    assert r["n"] == 100


def test_roi_outside_volume_is_bounds_error():
    v = make_volume(np.zeros((10, 10, 1), dtype=np.float32))
    with pytest.raises(BoundsError):
        roi_mean(v, center_mm=(0.0, 0.0, 0.0), side_mm=10.0)
    with pytest.raises(BoundsError):
        roi_mean(v, center_mm=(4.5, 4.5, 50.0), side_mm=4.0)
