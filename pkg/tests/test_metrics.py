import math

import numpy as np
import pytest

from cardiseg.errors import ShapeError, UndefinedMetricError
from cardiseg.metrics import (
    assd,
    auto_grade,
    dsc,
    erosion_sensitivity,
    evaluate_pair,
    hausdorff,
    relative_volumes,
    surface_voxels,
    volume_ml,
)
from cardiseg.volumes import STRUCTURE_NAMES

# ---------------------------------------------------------------------------
# Brute-force oracle: explicit neighbor scan + pairwise distances
# ---------------------------------------------------------------------------


def oracle_surface(mask):
    nx, ny, nz = mask.shape
    surf = np.zeros_like(mask, dtype=bool)
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not mask[x, y, z]:
                    continue
                for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    xx, yy, zz = x + dx, y + dy, z + dz
                    outside = not (0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz)
                    if outside or not mask[xx, yy, zz]:
                        surf[x, y, z] = True
                        break
    return surf


def oracle_assd_hd(a, b, spacing):
    sa = np.argwhere(oracle_surface(a)).astype(np.float64) * np.asarray(spacing)
    sb = np.argwhere(oracle_surface(b)).astype(np.float64) * np.asarray(spacing)
    dist = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(axis=2))
    d_ab = dist.min(axis=1)
    d_ba = dist.min(axis=0)
    oracle_assd = (d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba))
    oracle_hd = max(d_ab.max(), d_ba.max())
    return oracle_assd, oracle_hd


def random_mask(rng, shape, p=0.25):
    while True:
        m = rng.random(shape) < p
        if m.any():
            return m


# ---------------------------------------------------------------------------
# DSC
# ---------------------------------------------------------------------------


def test_dsc_identical_and_disjoint():
    m = np.zeros((4, 4, 4), dtype=bool)
    m[1:3, 1:3, 1:3] = True
    assert dsc(m, m) == 1.0
    other = np.zeros_like(m)
    other[0, 0, 0] = True
    assert dsc(m, other) == 0.0


def test_dsc_shifted_cube():
    a = np.zeros((8, 8, 8), dtype=bool)
    b = np.zeros_like(a)
    a[0:4, 0:4, 0:4] = True
    b[2:6, 0:4, 0:4] = True
    assert dsc(a, b) == 0.5  # 2*32 / 128


def test_dsc_both_empty_is_one():
    e = np.zeros((3, 3, 3), dtype=bool)
    assert dsc(e, e) == 1.0


def test_dsc_symmetric_and_spacing_free():
    rng = np.random.default_rng(0)
    a, b = random_mask(rng, (10, 10, 10)), random_mask(rng, (10, 10, 10))
    assert dsc(a, b) == dsc(b, a)


def test_dsc_shape_mismatch():
    with pytest.raises(ShapeError):
        dsc(np.zeros((2, 2, 2), bool), np.zeros((3, 3, 3), bool))


# ---------------------------------------------------------------------------
# Surface distances
# ---------------------------------------------------------------------------


def test_assd_identical_masks_zero():
    m = np.zeros((6, 6, 6), dtype=bool)
    m[2:5, 2:5, 2:5] = True
    assert assd(m, m, (1.0, 1.0, 1.0)) == 0.0
    assert hausdorff(m, m, (1.0, 1.0, 1.0)) == 0.0


def test_assd_two_single_voxels():
    a = np.zeros((8, 1, 1), dtype=bool)
    b = np.zeros_like(a)
    a[2, 0, 0] = True
    b[5, 0, 0] = True
    assert abs(assd(a, b, (0.8, 0.8, 0.8)) - 2.4) < 1e-12


def test_surface_definition_counts_border_as_background():
    m = np.ones((3, 3, 3), dtype=bool)
    assert surface_voxels(m).sum() == 26  # all but the center voxel
    assert np.array_equal(surface_voxels(m), oracle_surface(m))


def test_assd_hausdorff_match_brute_force_random():
    rng = np.random.default_rng(1)
    for trial in range(20):
        shape = tuple(rng.integers(4, 13, size=3))
        spacing = tuple(rng.uniform(0.5, 2.0, size=3))
        a, b = random_mask(rng, shape), random_mask(rng, shape)
        o_assd, o_hd = oracle_assd_hd(a, b, spacing)
        assert abs(assd(a, b, spacing) - o_assd) < 1e-9
        assert abs(hausdorff(a, b, spacing) - o_hd) < 1e-9


def test_hausdorff_nested_cubes_matches_oracle():
    outer = np.zeros((14, 14, 14), dtype=bool)
    inner = np.zeros_like(outer)
    outer[1:13, 1:13, 1:13] = True
    inner[3:11, 3:11, 3:11] = True
    o_assd, o_hd = oracle_assd_hd(outer, inner, (1.0, 1.0, 1.0))
    assert abs(hausdorff(outer, inner, (1.0, 1.0, 1.0)) - o_hd) < 1e-12
    assert abs(assd(outer, inner, (1.0, 1.0, 1.0)) - o_assd) < 1e-12


def test_hd_at_least_assd():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = random_mask(rng, (7, 7, 7)), random_mask(rng, (7, 7, 7))
        sp = (1.0, 1.0, 1.0)
        assert hausdorff(a, b, sp) >= assd(a, b, sp) - 1e-12


def test_distance_scales_with_spacing():
    rng = np.random.default_rng(3)
    a, b = random_mask(rng, (9, 9, 9)), random_mask(rng, (9, 9, 9))
    base = assd(a, b, (1.0, 1.0, 1.0))
    scaled = assd(a, b, (2.5, 2.5, 2.5))
    assert abs(scaled - 2.5 * base) < 1e-9
    assert abs(hausdorff(a, b, (2.5, 2.5, 2.5)) - 2.5 * hausdorff(a, b, (1.0, 1.0, 1.0))) < 1e-9


def test_empty_mask_is_undefined():
    m = np.zeros((4, 4, 4), dtype=bool)
    full = ~m
    with pytest.raises(UndefinedMetricError):
        assd(m, full, (1, 1, 1))
    with pytest.raises(UndefinedMetricError):
        hausdorff(full, m, (1, 1, 1))


# ---------------------------------------------------------------------------
# Volumes
# ---------------------------------------------------------------------------


def test_volume_ml_cube():
    m = np.zeros((10, 10, 10), dtype=bool)
    m[:, :, :] = True
    assert volume_ml(m, (1.0, 1.0, 1.0)) == 1.0
    assert volume_ml(np.zeros((5, 5, 5), bool), (1, 1, 1)) == 0.0


def test_volume_additive_over_disjoint():
    a = np.zeros((6, 6, 6), dtype=bool)
    b = np.zeros_like(a)
    a[:3] = True
    b[4:] = True
    sp = (1.1, 0.9, 1.3)
    assert abs(volume_ml(a | b, sp) - (volume_ml(a, sp) + volume_ml(b, sp))) < 1e-12


def test_erosion_sensitivity_solid_cube():
    m = np.zeros((12, 12, 12), dtype=bool)
    m[1:11, 1:11, 1:11] = True
    assert abs(erosion_sensitivity(m, (1, 1, 1)) - (1 - 8**3 / 10**3)) < 1e-12


def test_erosion_sensitivity_thin_sheet():
    m = np.zeros((10, 10, 3), dtype=bool)
    m[:, :, 1] = True
    assert erosion_sensitivity(m, (1, 1, 1)) == 1.0


def test_erosion_sensitivity_empty_rejected():
    with pytest.raises(UndefinedMetricError):
        erosion_sensitivity(np.zeros((2, 2, 2), bool), (1, 1, 1))


# ---------------------------------------------------------------------------
# Report assembly / relative volumes
# ---------------------------------------------------------------------------


def _toy_labels():
    lab = np.zeros((12, 12, 12), dtype=np.uint8)
    for k in range(1, 8):
        x = (k - 1) % 4 * 3
        y = (k - 1) // 4 * 5
        lab[x : x + 2, y : y + 2, 2:5] = k
    return lab


def test_evaluate_pair_self_comparison():
    lab = _toy_labels()
    rep = evaluate_pair(lab, lab, spacing=(1.0, 1.0, 1.0))
    assert rep.mean_dsc == 1.0
    assert rep.mean_assd_mm == 0.0
    assert rep.full_heart_ml == rep.reference_full_heart_ml > 0


def test_relative_volumes_sum_to_one():
    rep = evaluate_pair(_toy_labels(), _toy_labels(), spacing=(1.0, 1.0, 1.0))
    rel = relative_volumes(rep)
    assert abs(sum(rel.values()) - 1.0) < 1e-12


def test_relative_volumes_single_structure():
    lab = np.zeros((6, 6, 6), dtype=np.uint8)
    lab[2:4, 2:4, 2:4] = 2
    rep = evaluate_pair(lab, lab, spacing=(1.0, 1.0, 1.0))
    rel = relative_volumes(rep)
    assert rel[STRUCTURE_NAMES[2]] == 1.0


# ---------------------------------------------------------------------------
# Grading
# ---------------------------------------------------------------------------


def test_grade_identical_maps_is_one():
    lab = _toy_labels()
    out = auto_grade(lab, lab, spacing=(1.0, 1.0, 1.0))
    assert out["grade"] == 1
    assert all(d == 0.0 for d in out["deviations_mm"].values())


def test_grade_all_background_is_five():
    ref = _toy_labels()
    out = auto_grade(np.zeros_like(ref), ref, spacing=(1.0, 1.0, 1.0))
    assert out["grade"] == 5


def test_grade_one_structure_displaced_5mm_is_three():
    ref = _toy_labels()
    auto = ref.copy()
    mask = ref == 7
    auto[mask] = 0
    shifted = np.zeros_like(mask)
    shifted[:, :, 5:8] = mask[:, :, 0:3]  # move structure 7 by 5 voxels in z
    auto[shifted] = 7
    out = auto_grade(auto, ref, spacing=(1.0, 1.0, 1.0))
    assert out["grade"] == 3
    assert out["deviations_mm"][STRUCTURE_NAMES[7]] == pytest.approx(5.0)


def test_grade_two_structures_slightly_off_is_two():
    ref = _toy_labels()
    auto = ref.copy()
    for k in (3, 4):
        mask = ref == k
        auto[mask] = 0
        shifted = np.zeros_like(mask)
        shifted[:, :, 4:7] = mask[:, :, 2:5]  # 2 mm shift in z, no other structure there
        auto[shifted] = k
    out = auto_grade(auto, ref, spacing=(1.0, 1.0, 1.0))
    assert out["grade"] == 2


def test_grade_missing_structure_falls_to_four_or_five():
    ref = _toy_labels()
    auto = ref.copy()
    auto[ref == 5] = 0  # one structure vanished: infinite deviation
    out = auto_grade(auto, ref, spacing=(1.0, 1.0, 1.0))
    assert out["grade"] == 4  # small misclassified fraction
    assert math.isinf(out["deviations_mm"][STRUCTURE_NAMES[5]])
