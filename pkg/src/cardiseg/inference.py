"""Full-volume segmentation: tiling, ensemble probability averaging, argmax
labeling, and largest-component postprocessing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigError, EnsembleError
from .network import forward
from .volumes import LabelMap, PreprocessSettings, Volume, preprocess, resample

#: Face-adjacency (6-connected) structuring element.
_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)
#: The pulmonary trunk may legitimately consist of several components.
_MULTI_COMPONENT_LABELS = frozenset({7})


@dataclass
class SegmentationResult:
    labels: LabelMap
    probabilities: np.ndarray | None = None
    provenance: list = field(default_factory=list)


def _tile_starts(padded, patch, stride):
    starts = list(range(0, padded - patch + 1, stride))
    if starts[-1] != padded - patch:
        starts.append(padded - patch)
    return starts


def predict_volume(params_list, image, patch_shape=None, overlap=0.0, keep_probabilities=False):
    """Tile a preprocessed volume, average member softmax outputs voxelwise
    (and across overlapping tiles), and take the per-voxel argmax.

    The volume is edge-replication padded so the tile grid covers it exactly;
    ties in the argmax resolve to the lower label index.
    """
    if not params_list:
        raise ConfigError("at least one ensemble member is required")
    hashes = {p.spec_hash for p in params_list}
    if len(hashes) > 1:
        raise EnsembleError(f"ensemble members use different specs: {sorted(hashes)}")
    if not 0.0 <= overlap < 1.0:
        raise ConfigError("overlap must be in [0, 1)")
    patch = tuple(patch_shape or params_list[0].spec.patch_shape)

    data = image.data.astype(np.float32)
    padded_shape = tuple(max(n, p) for n, p in zip(data.shape, patch))
    strides = tuple(max(1, int(round(p * (1.0 - overlap)))) for p in patch)
    starts = [_tile_starts(pn, p, s) for pn, p, s in zip(padded_shape, patch, strides)]
    pads = [(0, pn - n) for pn, n in zip(padded_shape, data.shape)]
    if any(hi for _, hi in pads):
        data = np.pad(data, pads, mode="edge")

    num_classes = params_list[0].spec.num_classes
    prob_sum = np.zeros((num_classes,) + padded_shape, dtype=np.float32)
    cover = np.zeros(padded_shape, dtype=np.float32)

    tiles = [
        (x, y, z) for x in starts[0] for y in starts[1] for z in starts[2]
    ]
    batch_size = 8
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start : start + batch_size]
        batch = torch.from_numpy(
            np.stack(
                [
                    data[x : x + patch[0], y : y + patch[1], z : z + patch[2]]
                    for x, y, z in chunk
                ]
            )
        ).unsqueeze(1)
        member_sum = None
        for params in params_list:
            probs = forward(params, batch, mode="eval")
            member_sum = probs if member_sum is None else member_sum + probs
        mean = (member_sum / len(params_list)).numpy()
        for i, (x, y, z) in enumerate(chunk):
            prob_sum[:, x : x + patch[0], y : y + patch[1], z : z + patch[2]] += mean[i]
            cover[x : x + patch[0], y : y + patch[1], z : z + patch[2]] += 1.0

    probs = prob_sum / cover
    crop = tuple(slice(0, n) for n in image.shape)
    probs = probs[(slice(None),) + crop]
    labels = LabelMap(
        np.argmax(probs, axis=0).astype(np.uint8),
        spacing=image.spacing,
        origin=image.origin,
    )
    return SegmentationResult(
        labels=labels,
        probabilities=probs if keep_probabilities else None,
        provenance=[p.manifest() for p in params_list],
    )


def postprocess_components(labels):
    """Keep only the largest 6-connected component of each structure, except
    those allowed to be multi-component; removed voxels become background.
    Size ties keep the component containing the smallest linear voxel index."""
    data = labels.data.copy()
    for label in range(1, 8):
        if label in _MULTI_COMPONENT_LABELS:
            continue
        mask = data == label
        if not mask.any():
            continue
        comps, count = ndimage.label(mask, structure=_CONNECTIVITY)
        if count <= 1:
            continue
        sizes = np.bincount(comps.reshape(-1))[1:]
        biggest = np.flatnonzero(sizes == sizes.max()) + 1
        if len(biggest) == 1:
            keep = biggest[0]
        else:
            flat = comps.reshape(-1)
            keep = min(biggest, key=lambda c: int(np.argmax(flat == c)))
        data[mask & (comps != keep)] = 0
    return LabelMap(data, spacing=labels.spacing, origin=labels.origin)


def segment(params_list, raw_image, settings=None, overlap=0.0, keep_probabilities=False):
    """Raw HU volume to labels on its own grid: smooth, normalize, resample,
    tile-predict, largest-component postprocess, resample labels back."""
    settings = settings or PreprocessSettings()
    if raw_image.intensity_kind != "HU":
        raise ConfigError("segment expects a raw HU volume")
    prepared = preprocess(raw_image, settings)
    result = predict_volume(
        params_list, prepared, overlap=overlap, keep_probabilities=keep_probabilities
    )
    cleaned = postprocess_components(result.labels)
    native = resample(cleaned, raw_image.spacing, output_shape=raw_image.shape)
    return SegmentationResult(
        labels=native,
        probabilities=result.probabilities,
        provenance=result.provenance,
    )
