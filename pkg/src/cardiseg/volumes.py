"""Volume / label-map data model, native file format, and preprocessing.

Arrays are indexed ``data[x, y, z]`` with shape ``(nx, ny, nz)``. The native
``.vol`` payload stores the same grid z-major with x varying fastest, which is
the Fortran byte order of that indexing. Spacing and origin are millimetres;
the physical position of voxel ``(i, j, k)`` is ``origin + (i, j, k) * spacing``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BoundsError,
    ConfigError,
    FormatError,
    IntegrityError,
    ShapeError,
    StateError,
)

HU_MIN_DEFAULT = -1024.0
HU_MAX_DEFAULT = 3071.0

#: Fixed label schema: background plus the seven segmented cardiac structures.
STRUCTURE_NAMES = {
    0: "background",
    1: "lv_myocardium",
    2: "lv_cavity",
    3: "right_ventricle",
    4: "left_atrium",
    5: "right_atrium",
    6: "ascending_aorta",
    7: "pulmonary_trunk",
}
STRUCTURE_LABELS = tuple(range(1, 8))
#: Chambers + LV myocardium; their sum is the full-heart volume.
FULL_HEART_LABELS = (1, 2, 3, 4, 5)

_DTYPES = {"int16": np.int16, "float32": np.float32, "uint8": np.uint8}


def _check_grid(data, spacing, origin):
    if data.ndim != 3:
        raise ShapeError(f"expected a 3D array, got ndim={data.ndim}")
    if len(spacing) != 3 or len(origin) != 3:
        raise ConfigError("spacing and origin must have three components")
    if any(s <= 0 for s in spacing):
        raise ConfigError(f"spacing components must be positive, got {spacing}")
    if any(n < 1 for n in data.shape):
        raise ShapeError(f"all shape components must be >= 1, got {data.shape}")


class Volume:
    """Scalar 3D image. ``intensity_kind`` is 'HU' or 'normalized' ([0, 1])."""

    def __init__(self, data, spacing, origin=(0.0, 0.0, 0.0), intensity_kind="HU"):
        data = np.asarray(data)
        if data.dtype not in (np.int16, np.float32, np.float64, np.uint8):
            data = data.astype(np.float32)
        _check_grid(data, spacing, origin)
        if intensity_kind not in ("HU", "normalized"):
            raise ConfigError(f"unknown intensity_kind {intensity_kind!r}")
        if intensity_kind == "normalized":
            lo, hi = float(data.min()), float(data.max())
            if lo < 0.0 or hi > 1.0:
                raise ConfigError(
                    f"normalized volume has values outside [0, 1]: [{lo}, {hi}]"
                )
        self.data = data
        self.spacing = tuple(float(s) for s in spacing)
        self.origin = tuple(float(o) for o in origin)
        self.intensity_kind = intensity_kind

    @property
    def shape(self):
        return self.data.shape

    def voxel_volume_ml(self):
        sx, sy, sz = self.spacing
        return sx * sy * sz / 1000.0


class LabelMap:
    """Integer grid over the 8-class schema, grid-aligned with a Volume."""

    SCHEMA = STRUCTURE_NAMES

    def __init__(self, data, spacing, origin=(0.0, 0.0, 0.0)):
        data = np.asarray(data)
        if data.dtype != np.uint8:
            if data.size and (data.min() < 0 or data.max() > 255):
                raise ConfigError("label values outside uint8 range")
            data = data.astype(np.uint8)
        _check_grid(data, spacing, origin)
        if data.max(initial=0) > 7:
            raise ConfigError(f"label values must be in 0..7, max is {data.max()}")
        self.data = data
        self.spacing = tuple(float(s) for s in spacing)
        self.origin = tuple(float(o) for o in origin)

    @property
    def shape(self):
        return self.data.shape

    def mask(self, label):
        return self.data == label


@dataclass
class PreprocessSettings:
    """Intensity window, smoothing width, and resampling target."""

    smooth_sigma_mm: float = 2.0
    target_spacing_mm: float = 0.8
    hu_min: float = HU_MIN_DEFAULT
    hu_max: float = HU_MAX_DEFAULT

    def __post_init__(self):
        if self.smooth_sigma_mm < 0:
            raise ConfigError("smooth_sigma_mm must be >= 0")
        if self.target_spacing_mm <= 0:
            raise ConfigError("target_spacing_mm must be > 0")
        if not self.hu_min < self.hu_max:
            raise ConfigError("hu_min must be < hu_max")


# ---------------------------------------------------------------------------
# Native format: <stem>.vol raw payload + <stem>.json sidecar
# ---------------------------------------------------------------------------


def _vol_paths(path):
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".vol", ".json") else p
    return stem.with_suffix(".vol"), stem.with_suffix(".json")


def write_volume(v, path):
    """Write a Volume or LabelMap in the native format (payload + sidecar).
    float64 data is stored as float32 (the format's widest type)."""
    vol_path, json_path = _vol_paths(path)
    is_labels = isinstance(v, LabelMap)
    dtype_name = "uint8" if is_labels else v.data.dtype.name
    if dtype_name == "float64":
        dtype_name = "float32"
    if dtype_name not in _DTYPES:
        raise ConfigError(f"dtype {dtype_name} not supported by the native format")
    meta = {
        "shape": list(v.shape),
        "spacing_mm": list(v.spacing),
        "origin_mm": list(v.origin),
        "dtype": dtype_name,
        "kind": "labels" if is_labels else "image",
        "intensity": "HU" if is_labels else v.intensity_kind,
    }
    payload = np.asfortranarray(v.data.astype(_DTYPES[dtype_name], copy=False))
    with open(vol_path, "wb") as f:
        f.write(payload.tobytes(order="F"))
    with open(json_path, "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def _read_native(path):
    vol_path, json_path = _vol_paths(path)
    if not vol_path.exists() or not json_path.exists():
        raise FormatError(f"native volume {vol_path} or its sidecar is missing")
    try:
        meta = json.loads(json_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed sidecar {json_path}: {e}") from e
    for key in ("shape", "spacing_mm", "origin_mm", "dtype", "kind", "intensity"):
        if key not in meta:
            raise FormatError(f"sidecar {json_path} lacks required key {key!r}")
    if meta["dtype"] not in _DTYPES:
        raise FormatError(f"sidecar dtype {meta['dtype']!r} not supported")
    shape = tuple(int(n) for n in meta["shape"])
    dtype = _DTYPES[meta["dtype"]]
    raw = vol_path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise IntegrityError(
            f"{vol_path}: payload is {len(raw)} bytes, sidecar implies {expected}"
        )
    data = np.frombuffer(raw, dtype="<" + np.dtype(dtype).str[1:]).reshape(
        shape, order="F"
    )
    return data.astype(dtype), meta


def read_volume(path):
    """Read an image Volume; dispatches native / NIfTI-1 by extension."""
    p = Path(path)
    if p.suffix == ".nii":
        from .nifti import read_nifti

        return read_nifti(p)
    data, meta = _read_native(path)
    if meta["kind"] != "image":
        raise FormatError(f"{path} holds labels, not an image; use read_labelmap")
    return Volume(
        data,
        spacing=meta["spacing_mm"],
        origin=meta["origin_mm"],
        intensity_kind=meta["intensity"],
    )


def read_labelmap(path):
    data, meta = _read_native(path)
    if meta["kind"] != "labels":
        raise FormatError(f"{path} holds an image, not labels; use read_volume")
    return LabelMap(data, spacing=meta["spacing_mm"], origin=meta["origin_mm"])


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _target_shape(shape, spacing, target):
    # 1e-7 slack absorbs float rounding so an exact-ratio resample does not
    # gain a voxel from ceil.
    return tuple(
        max(1, int(math.ceil(n * s / t - 1e-7)))
        for n, s, t in zip(shape, spacing, target)
    )


def _lerp_along_axis(arr, coords, axis):
    n = arr.shape[axis]
    lo = np.floor(coords).astype(np.int64)
    frac = (coords - lo).astype(arr.dtype)
    lo = np.clip(lo, 0, n - 1)
    hi = np.clip(lo + 1, 0, n - 1)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    w = frac.reshape([-1 if ax == axis else 1 for ax in range(arr.ndim)])
    return a + (b - a) * w


def resample(v, target_spacing, output_shape=None):
    """Resample to ``target_spacing``; trilinear for Volumes, nearest for
    LabelMaps. Output shape is ceil(n*s/t) per axis unless given explicitly.
    Coordinates outside the source grid replicate the edge voxel."""
    target = tuple(float(t) for t in target_spacing)
    if any(t <= 0 for t in target):
        raise ConfigError("target spacing components must be > 0")
    if output_shape is None and target == v.spacing:
        out = v.data.copy()
        return _like(v, out, v.spacing, v.origin)
    shape = _target_shape(v.shape, v.spacing, target) if output_shape is None else tuple(output_shape)
    # Continuous source index of each output voxel along one axis.
    coords = [
        np.clip(np.arange(m) * (t / s), 0.0, n - 1)
        for m, t, s, n in zip(shape, target, v.spacing, v.shape)
    ]
    if isinstance(v, LabelMap):
        idx = [np.floor(c + 0.5).astype(np.int64) for c in coords]  # nearest, half-up
        out = v.data[np.ix_(*idx)]
        return LabelMap(out, spacing=target, origin=v.origin)
    out = v.data.astype(np.float32)
    for axis in range(3):
        out = _lerp_along_axis(out, coords[axis].astype(np.float64), axis)
    return Volume(out, spacing=target, origin=v.origin, intensity_kind=v.intensity_kind)


def _like(v, data, spacing, origin):
    if isinstance(v, LabelMap):
        return LabelMap(data, spacing=spacing, origin=origin)
    return Volume(data, spacing=spacing, origin=origin, intensity_kind=v.intensity_kind)


# ---------------------------------------------------------------------------
# Smoothing, normalization, ROI statistics
# ---------------------------------------------------------------------------


def gaussian_kernel_1d(sigma_voxels):
    """Sampled Gaussian truncated at 4 sigma, normalized to unit sum."""
    if sigma_voxels <= 0:
        return np.array([1.0])
    radius = int(math.ceil(4.0 * sigma_voxels))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(k**2) / (2.0 * sigma_voxels**2))
    return w / w.sum()


def _convolve_axis_replicate(arr, kernel, axis):
    radius = (len(kernel) - 1) // 2
    if radius == 0:
        return arr * kernel[0]
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="edge")
    out = np.zeros_like(arr)
    index = [slice(None)] * arr.ndim
    for tap, w in enumerate(kernel):
        index[axis] = slice(tap, tap + arr.shape[axis])
        out += w * padded[tuple(index)]
    return out


def smooth_axial(v, sigma_mm):
    """Gaussian-smooth each axial (x-y) slice; z is untouched. Sigma is given
    in mm and converted to voxels per in-plane axis."""
    if sigma_mm < 0:
        raise ConfigError("sigma_mm must be >= 0")
    data = v.data.astype(np.float64)
    for axis in (0, 1):  # x then y; separable 2D Gaussian
        kernel = gaussian_kernel_1d(sigma_mm / v.spacing[axis])
        data = _convolve_axis_replicate(data, kernel, axis)
    return Volume(data, spacing=v.spacing, origin=v.origin, intensity_kind=v.intensity_kind)


def normalize(v, settings=None):
    """Linearly rescale the HU window to [0, 1], clamping outside values."""
    settings = settings or PreprocessSettings()
    if v.intensity_kind != "HU":
        raise StateError("volume is already normalized")
    span = settings.hu_max - settings.hu_min
    out = (v.data.astype(np.float32) - settings.hu_min) / span
    np.clip(out, 0.0, 1.0, out=out)
    return Volume(out, spacing=v.spacing, origin=v.origin, intensity_kind="normalized")


def preprocess(v, settings=None):
    """Full chain: axial smoothing, window normalization, isotropic resample."""
    settings = settings or PreprocessSettings()
    out = smooth_axial(v, settings.smooth_sigma_mm)
    out = normalize(out, settings)
    t = settings.target_spacing_mm
    return resample(out, (t, t, t))


def roi_mean(v, center_mm, side_mm=10.0):
    """Mean and sample standard deviation inside a square axial ROI.

    The ROI is the set of voxels on the axial slice nearest to the center's z
    whose in-plane centers fall within the closed square of side ``side_mm``.
    """
    cx, cy, cz = (float(c) for c in center_mm)
    half = float(side_mm) / 2.0
    ox, oy, oz = v.origin
    sx, sy, sz = v.spacing
    nx, ny, nz = v.shape
    k = int(round((cz - oz) / sz))
    if not 0 <= k < nz:
        raise BoundsError("ROI center z falls outside the volume")
    lo_x, hi_x = cx - half, cx + half
    lo_y, hi_y = cy - half, cy + half
    # The volume physically covers the voxel cells, half a spacing beyond the
    # outermost voxel centers.
    if (
        lo_x < ox - sx / 2
        or hi_x > ox + (nx - 0.5) * sx
        or lo_y < oy - sy / 2
        or hi_y > oy + (ny - 0.5) * sy
    ):
        raise BoundsError("ROI square extends outside the volume")
    xs = ox + np.arange(nx) * sx
    ys = oy + np.arange(ny) * sy
    sel_x = (xs >= lo_x) & (xs <= hi_x)
    sel_y = (ys >= lo_y) & (ys <= hi_y)
    patch = v.data[np.ix_(sel_x, sel_y, [k])].astype(np.float64)
    if patch.size == 0:
        raise BoundsError("ROI contains no voxel centers")
    sd = float(patch.std(ddof=1)) if patch.size > 1 else 0.0
    return {"mean": float(patch.mean()), "sd": sd, "n": int(patch.size)}
