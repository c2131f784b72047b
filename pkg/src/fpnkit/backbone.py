"""Pre-activation ResNet feature extractors.

The backbone is the bottom-up pathway: one output per spatial scale, each
scale halving the extents of the previous one.  Taps are taken from the last
residual block of every stage, after a stage-exit BN+ReLU pre-activation, so
the pyramid consumes normalized features while the trunk continues from the
raw residual sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigurationError, ShapeError
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor

SUPPORTED_DEPTHS = (18, 34, 20, 56)

# blocks per stage for the ImageNet-style depths
_IMAGENET_BLOCKS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3)}


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture of one feature extractor.

    family: "imagenet" (7x7/2 stem + 3x3/2 max pool, 4 stages) or "cifar"
    (3x3/1 stem, 3 stages); "custom" builds arbitrary small variants for
    tests and gradient checks.
    """

    family: str
    stage_channels: Tuple[int, ...]
    blocks_per_stage: Tuple[int, ...]
    input_size: int
    stem_channels: int
    depth: Optional[int] = None

    @property
    def num_levels(self) -> int:
        return len(self.stage_channels)

    @property
    def imagenet_stem(self) -> bool:
        return self.family == "imagenet"

    @classmethod
    def from_depth(cls, depth: int) -> "BackboneSpec":
        if depth in _IMAGENET_BLOCKS:
            return cls(
                family="imagenet",
                stage_channels=(64, 128, 256, 512),
                blocks_per_stage=_IMAGENET_BLOCKS[depth],
                input_size=224,
                stem_channels=64,
                depth=depth,
            )
        if depth in (20, 56):
            n = (depth - 2) // 6
            return cls(
                family="cifar",
                stage_channels=(16, 32, 64),
                blocks_per_stage=(n, n, n),
                input_size=32,
                stem_channels=16,
                depth=depth,
            )
        raise ConfigurationError(f"unsupported backbone depth {depth}; supported: {SUPPORTED_DEPTHS}")

    @classmethod
    def custom(
        cls,
        stage_channels: Tuple[int, ...],
        blocks_per_stage: Tuple[int, ...],
        input_size: int,
        stem_channels: Optional[int] = None,
    ) -> "BackboneSpec":
        if len(stage_channels) != len(blocks_per_stage):
            raise ConfigurationError(
                f"stage_channels {stage_channels} and blocks_per_stage {blocks_per_stage} differ in length"
            )
        return cls(
            family="custom",
            stage_channels=tuple(stage_channels),
            blocks_per_stage=tuple(blocks_per_stage),
            input_size=input_size,
            stem_channels=stem_channels if stem_channels is not None else stage_channels[0],
        )

    def level_extents(self) -> Tuple[int, ...]:
        """Spatial extent of each level, finest first."""
        first = self.input_size // 4 if self.imagenet_stem else self.input_size
        return tuple(first // (2**i) for i in range(self.num_levels))


class PreActBlock(Module):
    """BN -> ReLU -> conv3x3 -> BN -> ReLU -> conv3x3, plus shortcut.

    The projection shortcut (1x1, when shape changes) consumes the
    pre-activated input, as in the identity-mappings design.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int, *, rng, dtype):
        super().__init__()
        self.bn1 = BatchNorm2d(in_channels, dtype=dtype)
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, pad=1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, stride=1, pad=1, bias=False, rng=rng, dtype=dtype)
        if stride != 1 or in_channels != out_channels:
            self.proj = Conv2d(in_channels, out_channels, 1, stride=stride, bias=False, rng=rng, dtype=dtype)
        else:
            self.proj = None

    def forward(self, x: Tensor) -> Tensor:
        a = ops.relu(self.bn1(x))
        h = self.conv1(a)
        h = self.conv2(ops.relu(self.bn2(h)))
        shortcut = self.proj(a) if self.proj is not None else x
        return h + shortcut


class Stage(Module):
    def __init__(self, in_channels: int, out_channels: int, blocks: int, stride: int, *, rng, dtype):
        super().__init__()
        self._block_names = []
        for i in range(blocks):
            name = f"block{i + 1}"
            block = PreActBlock(
                in_channels if i == 0 else out_channels,
                out_channels,
                stride if i == 0 else 1,
                rng=rng,
                dtype=dtype,
            )
            setattr(self, name, block)
            self._block_names.append(name)
        self.exit_bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        for name in self._block_names:
            x = getattr(self, name)(x)
        tap = ops.relu(self.exit_bn(x))
        return x, tap


class Backbone(Module):
    def __init__(self, spec: BackboneSpec, *, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.spec = spec
        if spec.imagenet_stem:
            self.stem = Conv2d(3, spec.stem_channels, 7, stride=2, pad=3, bias=False, rng=rng, dtype=dtype)
        else:
            self.stem = Conv2d(3, spec.stem_channels, 3, stride=1, pad=1, bias=False, rng=rng, dtype=dtype)
        self._stage_names = []
        previous = spec.stem_channels
        for i, (channels, blocks) in enumerate(zip(spec.stage_channels, spec.blocks_per_stage)):
            name = f"stage{i + 1}"
            setattr(self, name, Stage(previous, channels, blocks, 1 if i == 0 else 2, rng=rng, dtype=dtype))
            self._stage_names.append(name)
            previous = channels

    def forward(self, x: Tensor) -> List[Tensor]:
        spec = self.spec
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != spec.input_size or x.shape[3] != spec.input_size:
            raise ShapeError(
                f"backbone expects Nx3x{spec.input_size}x{spec.input_size} input, got {x.shape}"
            )
        h = self.stem(x)
        if spec.imagenet_stem:
            h = ops.max_pool2d(h, kernel=3, stride=2, pad=1)
        taps = []
        for name in self._stage_names:
            h, tap = getattr(self, name)(h)
            taps.append(tap)
        return taps


def build_backbone(spec, seed: int = 0, dtype=np.float64) -> Backbone:
    """Construct a backbone from a BackboneSpec or a supported depth."""
    if isinstance(spec, int):
        spec = BackboneSpec.from_depth(spec)
    rng = np.random.default_rng(seed)
    return Backbone(spec, rng=rng, dtype=np.dtype(dtype))


def extract_levels(backbone: Backbone, x: Tensor) -> List[Tensor]:
    """One tensor per scale, index 0 = highest resolution."""
    return backbone(x)
