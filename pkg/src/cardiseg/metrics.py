"""Segmentation quality metrics: overlap, surface distances, volumes, and the
five-point automatic grading rule.

Surfaces are foreground voxels with at least one background 6-neighbor, with
the volume border counted as background. Distances are Euclidean between voxel
centers, weighted by the grid spacing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError, UndefinedMetricError
from .volumes import FULL_HEART_LABELS, LabelMap, STRUCTURE_LABELS, STRUCTURE_NAMES


def _as_mask(a):
    return np.asarray(a, dtype=bool)


def _label_array(x):
    return x.data if isinstance(x, LabelMap) else np.asarray(x)


def _grid_spacing(x, spacing):
    if spacing is not None:
        return tuple(float(s) for s in spacing)
    if isinstance(x, LabelMap):
        return x.spacing
    raise ShapeError("spacing is required when labels are plain arrays")


def surface_voxels(mask):
    """Foreground voxels 6-adjacent to background; the border is background."""
    mask = _as_mask(mask)
    interior = np.ones_like(mask)
    for axis in range(3):
        for step in (1, -1):
            neighbor = np.zeros_like(mask)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if step == 1:
                src[axis], dst[axis] = slice(1, None), slice(0, -1)
            else:
                src[axis], dst[axis] = slice(0, -1), slice(1, None)
            neighbor[tuple(dst)] = mask[tuple(src)]
            interior &= neighbor
    return mask & ~interior


def dsc(a, b):
    """Dice similarity coefficient; two empty masks agree perfectly (1.0)."""
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def _surface_distances(a, b, spacing):
    """Distances from each surface voxel of ``a`` to the nearest surface voxel
    of ``b``, and vice versa."""
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise UndefinedMetricError("surface distance is undefined for an empty mask")
    surf_a = surface_voxels(a)
    surf_b = surface_voxels(b)
    dist_to_b = ndimage.distance_transform_edt(~surf_b, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~surf_a, sampling=spacing)
    return dist_to_b[surf_a], dist_to_a[surf_b]


def assd(a, b, spacing):
    """Average symmetric surface distance in mm."""
    d_ab, d_ba = _surface_distances(a, b, spacing)
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


def hausdorff(a, b, spacing):
    """Maximum symmetric surface distance in mm."""
    d_ab, d_ba = _surface_distances(a, b, spacing)
    return float(max(d_ab.max(), d_ba.max()))


def volume_ml(mask, spacing):
    sx, sy, sz = spacing
    return float(_as_mask(mask).sum()) * sx * sy * sz / 1000.0


def erode6(mask):
    """One-voxel 6-connected erosion; the volume border erodes like background."""
    mask = _as_mask(mask)
    return mask & ~surface_voxels(mask)


def erosion_sensitivity(mask, spacing):
    """Fractional volume lost when the mask is eroded by one voxel."""
    mask = _as_mask(mask)
    v = volume_ml(mask, spacing)
    if v == 0.0:
        raise UndefinedMetricError("erosion sensitivity is undefined for an empty mask")
    return (v - volume_ml(erode6(mask), spacing)) / v


@dataclass
class StructureMetrics:
    dsc: float
    assd_mm: float | None
    hd_mm: float | None
    volume_ml: float
    reference_volume_ml: float


@dataclass
class MetricsReport:
    """Per-structure DSC/ASSD/HD/volume plus per-report averages."""

    structures: dict = field(default_factory=dict)

    @property
    def mean_dsc(self):
        return float(np.mean([s.dsc for s in self.structures.values()]))

    @property
    def mean_assd_mm(self):
        vals = [s.assd_mm for s in self.structures.values() if s.assd_mm is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def full_heart_ml(self):
        return float(
            sum(self.structures[STRUCTURE_NAMES[k]].volume_ml for k in FULL_HEART_LABELS)
        )

    @property
    def reference_full_heart_ml(self):
        return float(
            sum(
                self.structures[STRUCTURE_NAMES[k]].reference_volume_ml
                for k in FULL_HEART_LABELS
            )
        )

    def to_dict(self):
        out = {}
        for name, s in self.structures.items():
            out[name] = {
                "dsc": s.dsc,
                "assd_mm": s.assd_mm,
                "hd_mm": s.hd_mm,
                "volume_ml": s.volume_ml,
                "reference_volume_ml": s.reference_volume_ml,
            }
        out["average"] = {"dsc": self.mean_dsc, "assd_mm": self.mean_assd_mm}
        out["full_heart_ml"] = self.full_heart_ml
        out["reference_full_heart_ml"] = self.reference_full_heart_ml
        return out


def evaluate_pair(auto, ref, spacing=None):
    """MetricsReport comparing an automatic label map against a reference.
    Surface distances are reported as None when either mask is empty."""
    spacing = _grid_spacing(ref, spacing)
    auto_data = _label_array(auto)
    ref_data = _label_array(ref)
    if auto_data.shape != ref_data.shape:
        raise ShapeError("label maps must share one grid")
    report = MetricsReport()
    for label in STRUCTURE_LABELS:
        ma = auto_data == label
        mr = ref_data == label
        try:
            a = assd(ma, mr, spacing)
            h = hausdorff(ma, mr, spacing)
        except UndefinedMetricError:
            a = h = None
        report.structures[STRUCTURE_NAMES[label]] = StructureMetrics(
            dsc=dsc(ma, mr),
            assd_mm=a,
            hd_mm=h,
            volume_ml=volume_ml(ma, spacing),
            reference_volume_ml=volume_ml(mr, spacing),
        )
    return report


def structure_volumes_ml(labels, spacing=None):
    """Volumes of labels 1..7 plus the full heart (labels 1-5), in mL."""
    data = _label_array(labels)
    spacing = _grid_spacing(labels, spacing)
    out = {STRUCTURE_NAMES[k]: volume_ml(data == k, spacing) for k in STRUCTURE_LABELS}
    out["full_heart"] = sum(out[STRUCTURE_NAMES[k]] for k in FULL_HEART_LABELS)
    return out


def relative_volumes(report):
    """Volumes of labels 1-5 as fractions of the full-heart volume."""
    full = report.full_heart_ml
    if full <= 0:
        raise UndefinedMetricError("full-heart volume is zero")
    return {
        STRUCTURE_NAMES[k]: report.structures[STRUCTURE_NAMES[k]].volume_ml / full
        for k in FULL_HEART_LABELS
    }


# ---------------------------------------------------------------------------
# Automatic five-point grading
# ---------------------------------------------------------------------------


def auto_grade(auto, ref, spacing=None):
    """Grade a segmentation 1 (deviations <= 1 mm everywhere) to 5 (failed).

    Per-structure deviation is the symmetric Hausdorff distance; a structure
    present in only one of the maps counts as an infinite deviation. Grades 4
    and 5 split on the fraction of reference-foreground voxels whose automatic
    label disagrees.
    """
    spacing = _grid_spacing(ref, spacing)
    auto_data = _label_array(auto)
    ref_data = _label_array(ref)
    if auto_data.shape != ref_data.shape:
        raise ShapeError("label maps must share one grid")

    deviations = {}
    for label in STRUCTURE_LABELS:
        ma = auto_data == label
        mr = ref_data == label
        has_a, has_r = bool(ma.any()), bool(mr.any())
        if not has_a and not has_r:
            continue
        if has_a != has_r:
            deviations[STRUCTURE_NAMES[label]] = math.inf
        else:
            deviations[STRUCTURE_NAMES[label]] = hausdorff(ma, mr, spacing)

    devs = list(deviations.values())
    n_mid = sum(1 for d in devs if 1.0 < d <= 3.0)
    n_large = sum(1 for d in devs if 3.0 < d <= 10.0)
    n_huge = sum(1 for d in devs if d > 10.0)

    if all(d <= 1.0 for d in devs):
        grade = 1
    elif n_huge == 0 and n_large == 0 and 1 <= n_mid <= 2:
        grade = 2
    elif n_huge == 0 and ((n_large == 1) or (n_large == 0 and n_mid > 2)):
        grade = 3
    else:
        ref_fg = ref_data != 0
        n_fg = int(ref_fg.sum())
        miscl = int((auto_data[ref_fg] != ref_data[ref_fg]).sum()) if n_fg else 0
        frac = miscl / n_fg if n_fg else 1.0
        grade = 4 if frac <= 0.5 else 5
    return {"grade": grade, "deviations_mm": deviations}
