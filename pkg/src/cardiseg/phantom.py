"""Synthetic cardiac CT phantoms.

Each patient is one parametric anatomy (LV cavity ellipsoid inside a
concentric myocardial shell, an RV crescent carved against that shell, two
atrial ellipsoids, and two great-vessel tubes, wrapped in an epicardial fat
rim and flanked by lung fields) rendered on a voxel grid three times: a contrast-enhanced volume and a
contrast-suppressed volume that share the exact same grid and labels, plus a
true non-contrast volume whose anatomy is the same geometry scaled about the
heart center and shifted, with its own matching labels.

Blood pools take a per-modality attenuation; the contrast-suppressed volume
additionally carries a smooth residual-contrast field confined to blood-pool
voxels; independent Gaussian noise is added per modality. Everything is a
pure function of the config seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, GeometryError
from .volumes import LabelMap, Volume, write_volume


@dataclass
class PhantomConfig:
    seed: int = 0
    shape: tuple = (64, 64, 64)
    spacing_mm: tuple = (1.5, 1.5, 1.5)
    blood_hu_ccta: float = 324.0
    blood_hu_vnc: float = 37.0
    blood_hu_ncct: float = 43.0
    myocardium_hu: float = 60.0
    soft_tissue_hu: float = 40.0
    lung_hu: float = -800.0
    noise_sd_ncct: float = 28.0
    noise_sd_vnc: float = 14.0
    residual_contrast_amp: float = 10.0
    ncct_scale: float = 0.95
    ncct_shift_mm: tuple = (3.0, -2.0, 1.5)
    anatomy_jitter: float = 1.0

    def __post_init__(self):
        if self.noise_sd_ncct < 0 or self.noise_sd_vnc < 0:
            raise ConfigError("noise standard deviations must be >= 0")
        if not 0.0 < self.ncct_scale <= 1.2:
            raise ConfigError("ncct_scale must be in (0, 1.2]")
        if not 0.0 <= self.anatomy_jitter <= 1.0:
            raise ConfigError("anatomy_jitter must be in [0, 1]")
        self.shape = tuple(int(n) for n in self.shape)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.ncct_shift_mm = tuple(float(s) for s in self.ncct_shift_mm)


class _Ellipsoid:
    def __init__(self, center, semi):
        self.center = np.asarray(center, dtype=np.float64)
        self.semi = np.asarray(semi, dtype=np.float64)

    def contains(self, pts):
        return (((pts - self.center) / self.semi) ** 2).sum(axis=1) <= 1.0

    def bounds(self):
        return self.center - self.semi, self.center + self.semi

    def inflated(self, margin):
        return _Ellipsoid(self.center, self.semi + margin)


class _Capsule:
    """Tube between two endpoints with hemispherical caps."""

    def __init__(self, p0, p1, radius):
        self.p0 = np.asarray(p0, dtype=np.float64)
        self.p1 = np.asarray(p1, dtype=np.float64)
        self.radius = float(radius)

    def contains(self, pts):
        axis = self.p1 - self.p0
        length_sq = float(axis @ axis)
        t = np.clip(((pts - self.p0) @ axis) / length_sq, 0.0, 1.0)
        nearest = self.p0 + t[:, None] * axis
        return ((pts - nearest) ** 2).sum(axis=1) <= self.radius**2

    def bounds(self):
        lo = np.minimum(self.p0, self.p1) - self.radius
        hi = np.maximum(self.p0, self.p1) + self.radius
        return lo, hi

    def inflated(self, margin):
        return _Capsule(self.p0, self.p1, self.radius + margin)


# Base anatomy in heart-centered mm. The assignment order below resolves
# overlaps: the myocardial shell wins over every later structure, which keeps
# it closed around the cavity.
_LV_CAVITY_CENTER = (-9.0, -5.0, -5.0)
_LV_CAVITY_SEMI = (15.0, 14.0, 20.0)
_LV_WALL_MM = 9.0
# Epicardial/pericardial fat: a rim around every structure, attenuating like
# adipose tissue. It is what makes outer heart borders visible without
# contrast, so the template carries it as fixed anatomy.
_FAT_RIM_MM = 4.0
_FAT_HU = -80.0


def _build_structures(rng, jitter):
    """Jittered solids as (label, solid) in assignment priority order; lung
    fields are returned separately.

    Jitter draws, in order: a global size factor (+/-15 %), a whole-heart
    position offset (the heart is not perfectly centered in real scans), then
    per-structure size factors (+/-5 %) and center offsets.
    """

    def u(lo=-1.0, hi=1.0, size=None):
        return rng.uniform(lo, hi, size=size)

    g = 1.0 + 0.15 * jitter * u()  # global size factor, +/-15 %
    heart_offset = 3.5 * jitter * u(size=3)

    def s():  # per-structure size factor, +/-5 %
        return 1.0 + 0.05 * jitter * u()

    def offset():
        return heart_offset + 2.0 * jitter * u(size=3)

    lv_scale = g * s()
    lv_center = np.asarray(_LV_CAVITY_CENTER) * g + offset()
    cavity_semi = np.asarray(_LV_CAVITY_SEMI) * lv_scale
    outer_semi = (np.asarray(_LV_CAVITY_SEMI) + _LV_WALL_MM) * lv_scale

    structures = [
        (2, _Ellipsoid(lv_center, cavity_semi)),
        (1, _Ellipsoid(lv_center, outer_semi)),
        (6, _Capsule(np.array([5.0, 4.0, 2.0]) * g + offset(),
                     np.array([10.0, 6.0, 26.0]) * g + heart_offset, 9.0 * g * s())),
        (7, _Capsule(np.array([20.0, -4.0, 5.0]) * g + offset(),
                     np.array([4.0, 9.0, 25.0]) * g + heart_offset, 8.0 * g * s())),
        (4, _Ellipsoid(np.array([-11.0, 14.0, 15.0]) * g + offset(),
                       np.array([12.5, 10.5, 11.5]) * g * s())),
        (5, _Ellipsoid(np.array([14.0, 11.0, 13.0]) * g + offset(),
                       np.array([12.5, 10.5, 12.5]) * g * s())),
        (3, _Ellipsoid(np.array([13.0, -8.0, -5.0]) * g + offset(),
                       np.array([16.0, 14.0, 21.0]) * g * s())),
    ]
    lungs = [
        _Ellipsoid(np.array([-42.0, 4.0, 0.0]) * g + heart_offset,
                   np.array([17.0, 30.0, 42.0]) * g),
        _Ellipsoid(np.array([42.0, 4.0, 0.0]) * g + heart_offset,
                   np.array([17.0, 30.0, 42.0]) * g),
    ]
    fat_margin = _FAT_RIM_MM * g * (1.0 + 0.1 * jitter * u())
    return structures, lungs, fat_margin


def _grid_points(cfg):
    axes = [np.arange(n) * sp for n, sp in zip(cfg.shape, cfg.spacing_mm)]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.reshape(-1) for a in grids], axis=1)


def _heart_center(cfg):
    return np.array(
        [(n - 1) * sp / 2.0 for n, sp in zip(cfg.shape, cfg.spacing_mm)]
    )


def _check_fits(structures, center, cfg, transform=None):
    lo_ok = np.zeros(3)
    hi_ok = np.array([(n - 1) * sp for n, sp in zip(cfg.shape, cfg.spacing_mm)])
    margin = np.asarray(cfg.spacing_mm)
    for label, solid in structures:
        lo, hi = solid.bounds()
        lo, hi = lo + center, hi + center
        if transform is not None:
            lo, hi = transform(lo), transform(hi)
        if np.any(lo < lo_ok - margin) or np.any(hi > hi_ok + margin):
            raise GeometryError(
                f"structure {label} extends outside the grid "
                f"(bounds {lo.round(1)}..{hi.round(1)})"
            )


def _assign_labels(points, structures, center):
    labels = np.zeros(len(points), dtype=np.uint8)
    rel = points - center
    unassigned = np.ones(len(points), dtype=bool)
    for label, solid in structures:
        hit = unassigned & solid.contains(rel)
        labels[hit] = label
        unassigned &= ~hit
    return labels


def _lung_mask(points, lungs, center, exclude):
    rel = points - center
    mask = np.zeros(len(points), dtype=bool)
    for solid in lungs:
        mask |= solid.contains(rel)
    return mask & ~exclude


def _fat_mask(points, structures, center, exclude, margin):
    rel = points - center
    mask = np.zeros(len(points), dtype=bool)
    for _, solid in structures:
        mask |= solid.inflated(margin).contains(rel)
    return mask & ~exclude


def _smooth_field_3d(shape, rng, sigma_mm, spacing):
    """Unit-amplitude low-frequency field: Gaussian-smoothed white noise,
    rescaled to sd 0.5 and clipped to [-1, 1] so excursions regularly reach
    the full amplitude without exceeding it."""
    from .volumes import _convolve_axis_replicate, gaussian_kernel_1d

    field = rng.normal(size=shape)
    for axis in range(3):
        kernel = gaussian_kernel_1d(sigma_mm / spacing[axis])
        field = _convolve_axis_replicate(field, kernel, axis)
    sd = field.std()
    if sd > 0:
        field = field / (2.0 * sd)
    return np.clip(field, -1.0, 1.0)


def generate_patient(cfg):
    """Render one phantom patient.

    Returns a dict with keys ``ccta``, ``vnc``, ``ncct`` (Volumes) and
    ``labels_ccta``, ``labels_ncct`` (LabelMaps). The contrast-enhanced and
    contrast-suppressed volumes share one geometry, so ``labels_ccta`` is
    valid for both.
    """
    ss = np.random.SeedSequence(cfg.seed)
    rng_jitter, rng_residual, rng_ccta, rng_vnc, rng_ncct = (
        np.random.default_rng(child) for child in ss.spawn(5)
    )

    structures, lungs, fat_margin = _build_structures(rng_jitter, cfg.anatomy_jitter)
    center = _heart_center(cfg)
    shift = np.asarray(cfg.ncct_shift_mm)
    scale = cfg.ncct_scale

    _check_fits(structures, center, cfg)
    _check_fits(
        structures,
        center,
        cfg,
        transform=lambda p: center + scale * (p - center) + shift,
    )

    points = _grid_points(cfg)
    labels_aligned = _assign_labels(points, structures, center)
    # A point p lies in the transformed anatomy iff its preimage lies in the
    # template; the preimage inverts scale-about-center plus shift.
    preimage = center + (points - center - shift) / scale
    labels_moved = _assign_labels(preimage, structures, center)

    lung_aligned = _lung_mask(points, lungs, center, labels_aligned > 0)
    lung_moved = _lung_mask(preimage, lungs, center, labels_moved > 0)
    fat_aligned = _fat_mask(points, structures, center, labels_aligned > 0, fat_margin)
    fat_moved = _fat_mask(preimage, structures, center, labels_moved > 0, fat_margin)

    # Residual contrast: a per-patient DC term (incomplete global suppression
    # varies between reconstructions) plus a smooth spatial pattern, together
    # capped at the configured amplitude.
    residual_dc = rng_residual.uniform(-0.5, 0.5)
    residual = _smooth_field_3d(cfg.shape, rng_residual, 8.0, cfg.spacing_mm)
    residual = np.clip(residual + residual_dc, -1.0, 1.0)
    residual = residual.reshape(-1) * cfg.residual_contrast_amp

    def render(labels, lung, fat, blood_hu, noise_sd, rng, residual_field=None):
        hu = np.full(len(points), cfg.soft_tissue_hu, dtype=np.float64)
        hu[lung] = cfg.lung_hu
        hu[fat] = _FAT_HU
        hu[labels == 1] = cfg.myocardium_hu
        blood = labels >= 2
        hu[blood] = blood_hu
        if residual_field is not None:
            hu[blood] += residual_field[blood]
        if noise_sd > 0:
            hu += rng.normal(0.0, noise_sd, size=len(points))
        img = np.rint(hu).astype(np.int16).reshape(cfg.shape)
        return Volume(img, spacing=cfg.spacing_mm, intensity_kind="HU")

    ccta = render(
        labels_aligned, lung_aligned, fat_aligned, cfg.blood_hu_ccta, cfg.noise_sd_vnc, rng_ccta
    )
    vnc = render(
        labels_aligned, lung_aligned, fat_aligned, cfg.blood_hu_vnc, cfg.noise_sd_vnc, rng_vnc,
        residual_field=residual,
    )
    ncct = render(
        labels_moved, lung_moved, fat_moved, cfg.blood_hu_ncct, cfg.noise_sd_ncct, rng_ncct
    )

    return {
        "ccta": ccta,
        "vnc": vnc,
        "ncct": ncct,
        "labels_ccta": LabelMap(labels_aligned.reshape(cfg.shape), spacing=cfg.spacing_mm),
        "labels_ncct": LabelMap(labels_moved.reshape(cfg.shape), spacing=cfg.spacing_mm),
    }


def aortic_root_center_mm(labels):
    """Centroid of the ascending-aorta label, for ROI placement."""
    idx = np.argwhere(labels.data == 6)
    if idx.size == 0:
        raise GeometryError("no ascending-aorta voxels in label map")
    return tuple(
        float(o + c * s)
        for o, c, s in zip(labels.origin, idx.mean(axis=0), labels.spacing)
    )


# ---------------------------------------------------------------------------
# Cohorts
# ---------------------------------------------------------------------------

_PATIENT_KEYS = ("ccta", "vnc", "ncct", "labels_ccta", "labels_ncct")


def generate_cohort(n, base_cfg, out_dir):
    """Write ``n`` phantom patients (seeds base+index) plus a manifest JSON.
    Returns the manifest as a dict; file paths are relative to ``out_dir``."""
    if n < 1:
        raise ConfigError("cohort size must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    patients = []
    for i in range(n):
        cfg = replace(base_cfg, seed=base_cfg.seed + i)
        rendered = generate_patient(cfg)
        pid = f"p{i:03d}"
        entry = {"id": pid}
        for key in _PATIENT_KEYS:
            name = f"{pid}_{key}.vol"
            write_volume(rendered[key], out / name)
            entry[key] = name
        patients.append(entry)
    manifest = {"patients": patients}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest


def load_manifest(path):
    """Read a cohort manifest; resolves file paths against its directory."""
    p = Path(path)
    manifest = json.loads(p.read_text())
    base = p.parent
    for entry in manifest["patients"]:
        for key in _PATIENT_KEYS:
            entry[key] = str(base / entry[key])
    return manifest
