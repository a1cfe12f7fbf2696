"""Training protocol: fold plans, patch sampling, the Adam schedule, and
checkpoint selection for per-test-image ensembles.

Each cross-validation fold holds out a group of patients; networks train on
the contrast-suppressed volumes of all other patients with their
contrast-derived labels. Validation loss is tracked on a fixed,
seed-deterministic grid of patches from the held-out images, and the
checkpoint minimizing the summed validation loss over a test image's co-fold
companions becomes that seed's ensemble member.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, NumericError, StateError
from .network import ParamSet, build, module_for, one_hot, soft_dice_loss

VAL_PATCHES_PER_IMAGE = 8


@dataclass
class TrainConfig:
    iterations: int = 10_000
    batch_size: int = 32
    lr0: float = 0.001
    lr_decay_factor: float = 0.7
    lr_decay_every: int = 2000
    val_every: int = 500
    patch_shape: tuple = (256, 256, 5)
    seeds_per_fold: int = 3
    #: "uniform" draws patch origins uniformly over valid positions;
    #: "balanced" centers half the patches on a uniformly chosen class.
    sampling: str = "uniform"

    def __post_init__(self):
        self.patch_shape = tuple(int(p) for p in self.patch_shape)
        for name in ("iterations", "batch_size", "lr_decay_every", "val_every", "seeds_per_fold"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError("lr_decay_factor must be in (0, 1]")
        if self.sampling not in ("uniform", "balanced"):
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")


@dataclass
class FoldPlan:
    """Partition of patient ids into equal folds. A test image's validation
    images are the other members of its own fold."""

    folds: list

    def __post_init__(self):
        flat = [pid for fold in self.folds for pid in fold]
        if len(flat) != len(set(flat)):
            raise ConfigError("fold plan assigns a patient twice")

    @property
    def patient_ids(self):
        return [pid for fold in self.folds for pid in fold]

    def fold_of(self, patient_id):
        for idx, fold in enumerate(self.folds):
            if patient_id in fold:
                return idx
        raise ConfigError(f"unknown patient id {patient_id!r}")

    def validation_ids(self, test_id):
        fold = self.folds[self.fold_of(test_id)]
        return [pid for pid in fold if pid != test_id]

    def training_ids(self, fold_index):
        return [
            pid
            for idx, fold in enumerate(self.folds)
            for pid in fold
            if idx != fold_index
        ]


@dataclass
class Checkpoint:
    params: ParamSet
    iteration: int
    val_losses: dict = field(default_factory=dict)

    @property
    def total_val_loss(self):
        return float(sum(self.val_losses.values()))


def make_fold_plan(patient_ids, num_folds, seed):
    """Deterministic shuffle into equal-size folds."""
    ids = list(patient_ids)
    if num_folds < 1 or len(ids) % num_folds != 0:
        raise ConfigError(
            f"{len(ids)} patients cannot be split into {num_folds} equal folds"
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    size = len(ids) // num_folds
    return FoldPlan([shuffled[i * size : (i + 1) * size] for i in range(num_folds)])


def lr_at(iteration, cfg):
    """Stepwise decayed learning rate."""
    if iteration < 0:
        raise ConfigError("iteration must be >= 0")
    return cfg.lr0 * cfg.lr_decay_factor ** (iteration // cfg.lr_decay_every)


def _pad_to_patch(image, labels, patch_shape):
    pads = [(0, max(0, p - n)) for n, p in zip(image.shape, patch_shape)]
    if any(hi for _, hi in pads):
        image = np.pad(image, pads, mode="constant", constant_values=0.0)
        labels = np.pad(labels, pads, mode="constant", constant_values=0)
    return image, labels


def sample_patch(image, labels, patch_shape, rng):
    """Uniformly placed patch plus its one-hot target.

    ``image`` is a normalized (nx, ny, nz) array, ``labels`` an aligned
    integer array. Axes smaller than the patch are end-padded with zeros
    (background), which leaves a single valid origin there.
    """
    image, labels = _pad_to_patch(image, labels, patch_shape)
    origin = tuple(
        int(rng.integers(0, n - p + 1)) for n, p in zip(image.shape, patch_shape)
    )
    return _cut_patch(image, labels, origin, patch_shape)


def _cut_patch(image, labels, origin, patch_shape):
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))
    img = torch.from_numpy(np.ascontiguousarray(image[sl], dtype=np.float32))
    lab = torch.from_numpy(np.ascontiguousarray(labels[sl]))
    target = one_hot(lab.unsqueeze(0), num_classes=8)[0]
    return img.unsqueeze(0), target


def sample_patch_balanced(image, labels, patch_shape, rng, class_voxels):
    """Half uniform, half aimed at a voxel of a uniformly chosen class.

    Aimed patches place the chosen voxel near (not exactly at) the patch
    center, stopping the network from learning a patch-center position prior
    that regular-grid tiling at inference would violate.
    """
    image, labels = _pad_to_patch(image, labels, patch_shape)
    if rng.random() < 0.5:
        origin = tuple(
            int(rng.integers(0, n - p + 1)) for n, p in zip(image.shape, patch_shape)
        )
    else:
        cls = class_voxels[int(rng.integers(0, len(class_voxels)))]
        voxel = cls[int(rng.integers(0, len(cls)))]
        origin = tuple(
            int(np.clip(v - p // 2 + rng.integers(-p // 4, p // 4 + 1), 0, n - p))
            for v, p, n in zip(voxel, patch_shape, image.shape)
        )
    return _cut_patch(image, labels, origin, patch_shape)


def _class_voxel_index(labels):
    """Voxel coordinates per present class, for balanced sampling."""
    return [np.argwhere(labels == k) for k in range(8) if (labels == k).any()]


def validation_patch_grid(image, labels, patch_shape, rng, count=VAL_PATCHES_PER_IMAGE):
    """Fixed evaluation patches for one held-out image; the rng decides their
    placement once so successive checkpoints see identical patches."""
    inputs, targets = [], []
    for _ in range(count):
        img, tgt = sample_patch(image, labels, patch_shape, rng)
        inputs.append(img)
        targets.append(tgt)
    return torch.stack(inputs), torch.stack(targets)


def train_one(fold_index, seed, data, fold_plan, cfg, spec):
    """Train one network on a fold's training images; returns all recorded
    checkpoints, each carrying per-held-out-image validation losses.

    ``data`` maps patient id to a dict with preprocessed ``image`` and aligned
    ``labels`` arrays. Training touches only the ids outside the fold.
    """
    train_ids = fold_plan.training_ids(fold_index)
    held_out = list(fold_plan.folds[fold_index])
    if not train_ids or not held_out:
        raise ConfigError("fold plan leaves no training or validation images")

    params = build(spec, seed=seed)
    module = module_for(params)
    optimizer = torch.optim.Adam(
        module.parameters(), lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8
    )
    sampler = np.random.default_rng(np.random.SeedSequence((seed, fold_index, 0xA11)))

    val_sets = {}
    for pid in held_out:
        grid_rng = np.random.default_rng(
            np.random.SeedSequence((seed, _stable_id(pid), 0xB0B))
        )
        val_sets[pid] = validation_patch_grid(
            data[pid]["image"], data[pid]["labels"], cfg.patch_shape, grid_rng
        )

    class_index = {}
    if cfg.sampling == "balanced":
        class_index = {
            pid: _class_voxel_index(data[pid]["labels"]) for pid in train_ids
        }

    checkpoints = []
    for iteration in range(1, cfg.iterations + 1):
        for group in optimizer.param_groups:
            group["lr"] = lr_at(iteration - 1, cfg)
        idx = sampler.integers(0, len(train_ids), size=cfg.batch_size)
        batch_in, batch_tg = [], []
        for i in idx:
            pid = train_ids[i]
            entry = data[pid]
            if cfg.sampling == "balanced":
                img, tgt = sample_patch_balanced(
                    entry["image"], entry["labels"], cfg.patch_shape, sampler,
                    class_index[pid],
                )
            else:
                img, tgt = sample_patch(
                    entry["image"], entry["labels"], cfg.patch_shape, sampler
                )
            batch_in.append(img)
            batch_tg.append(tgt)
        inputs = torch.stack(batch_in)
        targets = torch.stack(batch_tg)

        module.train()
        optimizer.zero_grad(set_to_none=True)
        loss = soft_dice_loss(module(inputs), targets, check_target=False)
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite loss at iteration {iteration} (fold {fold_index}, seed {seed})"
            )
        loss.backward()
        optimizer.step()

        if iteration % cfg.val_every == 0:
            val_losses = {
                pid: _validation_loss(params, val_sets[pid]) for pid in held_out
            }
            checkpoints.append(
                Checkpoint(params=params.clone(), iteration=iteration, val_losses=val_losses)
            )
    return checkpoints


def _stable_id(pid):
    return int.from_bytes(str(pid).encode(), "little") % (2**31)


def _validation_loss(params, val_set, batch_size=8):
    inputs, targets = val_set
    module = module_for(params)
    module.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(inputs), batch_size):
            chunk_p = module(inputs[start : start + batch_size])
            total += float(
                soft_dice_loss(
                    chunk_p, targets[start : start + batch_size], check_target=False
                )
            )
    return total


def select_ensemble(per_seed_checkpoints, test_image_id):
    """One checkpoint per seed: the argmin of summed validation loss over the
    test image's co-fold validation images; ties resolve to the earliest
    iteration. Returns the chosen ParamSets."""
    chosen = []
    for checkpoints in per_seed_checkpoints:
        if not checkpoints:
            raise StateError("a seed recorded no checkpoints")
        best = None
        best_key = None
        for ckpt in sorted(checkpoints, key=lambda c: c.iteration):
            val_ids = [pid for pid in ckpt.val_losses if pid != test_image_id]
            if not val_ids:
                raise StateError(
                    f"no validation losses besides the test image {test_image_id!r}"
                )
            score = sum(ckpt.val_losses[pid] for pid in val_ids)
            if best_key is None or score < best_key:
                best, best_key = ckpt, score
        chosen.append(best.params)
    return chosen


def assemble_global_ensemble(selected_per_fold):
    """Flatten per-fold member lists into one ensemble, rejecting duplicates
    (same spec hash and creation seed) and incomplete folds."""
    if not selected_per_fold or any(not members for members in selected_per_fold):
        raise StateError("every fold must contribute trained members")
    flat = [p for members in selected_per_fold for p in members]
    keys = [(p.spec_hash, p.seed) for p in flat]
    if len(keys) != len(set(keys)):
        raise StateError("duplicate ensemble members (same spec hash and seed)")
    return flat
