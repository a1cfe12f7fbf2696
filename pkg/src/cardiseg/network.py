"""Segmentation network: computation graph, forward pass, soft-Dice loss.

Tensors are laid out (B, C, x, y, z). The first layer is a true 3D
convolution (5x5x5); every other kernel has z-extent 1, so after layer 1 the
z slices are folded into the batch dimension and the remaining layers run as
2D convolutions. Folded 2D batch norm computes exactly the statistics a 3D
batch norm would (per channel over batch and all three spatial axes), so the
fold changes execution speed only, not the math.

The graph: one 5x5x5 stem, three stride-(2,2,1) downsampling convolutions
doubling the channel width each time, six residual blocks at 8x width, three
stride-(2,2,1) transposed convolutions back to base width, and a 5x5x1 output
convolution to 8 channels followed by a per-voxel softmax. Batch norm + ReLU
follow every convolution except the output one; the second convolution of a
residual block is normalized but activated only after the skip addition.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError, SpecError

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1
DICE_EPS = 1e-5


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int = 1
    num_classes: int = 8
    base_width: int = 16
    num_resblocks: int = 6
    patch_shape: tuple = (256, 256, 5)

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(int(p) for p in self.patch_shape))
        if self.base_width < 1:
            raise SpecError("base_width must be >= 1")
        px, py, pz = self.patch_shape
        if px % 8 or py % 8:
            raise SpecError("in-plane patch extents must be divisible by 8")
        if pz < 1:
            raise SpecError("patch depth must be >= 1")

    @property
    def widths(self):
        w = self.base_width
        return (w, 2 * w, 4 * w, 8 * w)

    def hash(self):
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class _ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(channels, eps=_BN_EPS, momentum=_BN_MOMENTUM)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(channels, eps=_BN_EPS, momentum=_BN_MOMENTUM)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        h = self.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return self.relu(h + x)


class SegmentationNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        w1, w2, w3, w4 = spec.widths
        self.stem = nn.Conv3d(spec.in_channels, w1, (5, 5, 5), padding=(2, 2, 2))
        self.stem_bn = nn.BatchNorm3d(w1, eps=_BN_EPS, momentum=_BN_MOMENTUM)
        self.down = nn.ModuleList(
            [
                nn.Conv2d(a, b, 3, stride=2, padding=1)
                for a, b in ((w1, w2), (w2, w3), (w3, w4))
            ]
        )
        self.down_bn = nn.ModuleList(
            [nn.BatchNorm2d(c, eps=_BN_EPS, momentum=_BN_MOMENTUM) for c in (w2, w3, w4)]
        )
        self.blocks = nn.ModuleList([_ResBlock(w4) for _ in range(spec.num_resblocks)])
        self.up = nn.ModuleList(
            [
                nn.ConvTranspose2d(a, b, 3, stride=2, padding=1, output_padding=1)
                for a, b in ((w4, w3), (w3, w2), (w2, w1))
            ]
        )
        self.up_bn = nn.ModuleList(
            [nn.BatchNorm2d(c, eps=_BN_EPS, momentum=_BN_MOMENTUM) for c in (w3, w2, w1)]
        )
        self.head = nn.Conv2d(w1, spec.num_classes, 5, padding=2)
        self.relu = nn.ReLU(inplace=True)
        self.last_bottleneck_shape = None

    def forward(self, x):
        b, c, px, py, pz = x.shape
        if c != self.spec.in_channels:
            raise ShapeError(f"expected {self.spec.in_channels} input channel(s), got {c}")
        if px % 8 or py % 8:
            raise ShapeError(f"in-plane extents must be divisible by 8, got {(px, py)}")
        h = self.relu(self.stem_bn(self.stem(x)))
        # Fold z into the batch: every remaining kernel has z-extent 1.
        h = h.permute(0, 4, 1, 2, 3).reshape(b * pz, -1, px, py)
        for conv, bn in zip(self.down, self.down_bn):
            h = self.relu(bn(conv(h)))
        for block in self.blocks:
            h = block(h)
        self.last_bottleneck_shape = (h.shape[2], h.shape[3], pz)
        for conv, bn in zip(self.up, self.up_bn):
            h = self.relu(bn(conv(h)))
        h = self.head(h)
        h = h.reshape(b, pz, -1, px, py).permute(0, 2, 3, 4, 1)
        return torch.softmax(h, dim=1)


def _init_conv(weight, bias, gen):
    fan_in = weight.shape[1] * weight.shape[2:].numel()
    weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
    bias.zero_()


def _transposed_fan_in(weight):
    # ConvTranspose weights are (in, out, kH, kW); fan-in counts input taps.
    return weight.shape[0] * weight.shape[2:].numel()


class ParamSet:
    """Named parameter and buffer tensors for one network instance, plus the
    spec hash and creation seed used for bookkeeping."""

    def __init__(self, tensors, spec, seed):
        self.tensors = tensors
        self.spec = spec
        self.spec_hash = spec.hash()
        self.seed = int(seed)
        self._module = None

    def clone(self):
        cloned = {k: v.detach().clone() for k, v in self.tensors.items()}
        return ParamSet(cloned, self.spec, self.seed)

    def trainable_count(self):
        module = module_for(self)
        return sum(p.numel() for p in module.parameters())

    def manifest(self, iteration=None, val_loss=None):
        return {
            "spec_hash": self.spec_hash,
            "seed": self.seed,
            "iteration": iteration,
            "val_loss": val_loss,
        }


def module_for(params: ParamSet) -> SegmentationNet:
    """Module whose tensors alias the ParamSet's (mutations propagate)."""
    if params._module is None:
        module = SegmentationNet(params.spec)
        module.load_state_dict(params.tensors, assign=True)
        params._module = module
    return params._module


def build(spec: NetworkSpec, seed: int) -> ParamSet:
    """Construct parameters: fan-in-scaled Gaussian conv weights, zero biases,
    unit-scale zero-offset batch norms. Deterministic in the seed."""
    gen = torch.Generator().manual_seed(int(seed))
    module = SegmentationNet(spec)
    with torch.no_grad():
        for name, m in module.named_modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d)):
                _init_conv(m.weight, m.bias, gen)
            elif isinstance(m, nn.ConvTranspose2d):
                fan_in = _transposed_fan_in(m.weight)
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                m.bias.zero_()
            elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
                m.num_batches_tracked.zero_()
    tensors = dict(module.state_dict(keep_vars=False))
    params = ParamSet(tensors, spec, seed)
    params._module = None  # rebuilt lazily so tensors alias via load
    return params


def forward(params: ParamSet, batch, mode="eval"):
    """Per-voxel class probabilities for a (B, 1, px, py, pz) batch.

    ``eval`` uses the stored batch-norm running statistics and tracks no
    gradients; ``train`` uses batch statistics and updates the running ones
    in place on the ParamSet.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if batch.dim() != 5:
        raise ShapeError(f"expected a 5D batch, got {tuple(batch.shape)}")
    module = module_for(params)
    if mode == "train":
        module.train()
        return module(batch)
    module.eval()
    with torch.no_grad():
        return module(batch)


def parameter_count(spec: NetworkSpec) -> int:
    return build(spec, seed=0).trainable_count()


def soft_dice_loss(probabilities, target, eps=DICE_EPS, check_target=True):
    """Negative sum over classes of the soft Dice coefficient with squared
    denominator terms; sums run over batch and voxels.

    ``check_target=False`` skips the one-hot validation for callers that
    construct the target themselves (it is a per-voxel scan)."""
    if probabilities.shape != target.shape:
        raise ShapeError(
            f"probabilities {tuple(probabilities.shape)} and target "
            f"{tuple(target.shape)} differ"
        )
    if check_target:
        with torch.no_grad():
            binary = ((target == 0) | (target == 1)).all()
            sums = target.sum(dim=1)
            if not bool(binary) or not bool(torch.allclose(sums, torch.ones_like(sums))):
                raise ConfigError("target must be one-hot over the class dimension")
    dims = [0] + list(range(2, probabilities.dim()))
    inter = (probabilities * target).sum(dim=dims)
    denom = (probabilities**2).sum(dim=dims) + (target**2).sum(dim=dims)
    return -((2.0 * inter + eps) / (denom + eps)).sum()


def one_hot(labels, num_classes=8, dtype=torch.float32):
    """(B, x, y, z) integer labels to (B, C, x, y, z) one-hot."""
    out = torch.zeros(
        (labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype
    )
    return out.scatter_(1, labels.unsqueeze(1).long(), 1.0)


# ---------------------------------------------------------------------------
# Checkpoint container: tensor file + JSON manifest
# ---------------------------------------------------------------------------


def save_params(params: ParamSet, directory, iteration=None, val_loss=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(params.tensors, d / "params.pt")
    manifest = params.manifest(iteration=iteration, val_loss=val_loss)
    manifest["spec"] = asdict(params.spec)
    manifest["spec"]["patch_shape"] = list(params.spec.patch_shape)
    with open(d / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_params(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    fields = dict(manifest["spec"])
    fields["patch_shape"] = tuple(fields["patch_shape"])
    spec = NetworkSpec(**fields)
    tensors = torch.load(d / "params.pt", weights_only=True)
    params = ParamSet(tensors, spec, manifest["seed"])
    if params.spec_hash != manifest["spec_hash"]:
        raise ConfigError(f"{d}: manifest spec hash does not match its spec")
    return params, manifest
