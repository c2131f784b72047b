"""Top-down pathway, lateral connections, and the four fusion variants.

Each merge level fuses the lateral projection of a backbone stage (the
"spatial" input, high resolution and weak semantics) with the upsampled
coarser pyramid output (the "semantic" input).  Variants:

  plain   elementwise sum
  ca      channel competition: a squeeze/excitation bottleneck over the
          concatenated global descriptors of both inputs emits a 2C sigmoid
          vector whose halves rescale the channels of each input
  srr     spatial recalibration: cross-channel means of both inputs pass
          through a stride-2 3x3 conv + BN, a x2 bilinear re-expansion and a
          1x1 anti-aliasing conv into two per-pixel sigmoid gates
  srr_ca  both gates applied jointly, each gated input then passing a 1x1
          conv + BN before the final sum

Merge modules keep their own parameters per level.  Attention modules carry a
``force_ones`` switch that replaces their gates with exact ones, which makes
every variant collapse to the plain sum (used by the reduction-identity
checks).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigurationError, ShapeError
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Module
from .tensor import Tensor

FUSIONS = ("plain", "ca", "srr", "srr_ca")
UPSAMPLINGS = ("bilinear", "nearest", "deconvolution")


@dataclass
class PyramidConfig:
    lateral_channels: int = 256
    upsampling: str = "bilinear"
    fusion: str = "plain"
    reduction: int = 16
    # An optional extra sigmoid after the combination convs of srr_ca; kept
    # switchable because both readings of the combined module are defensible.
    extra_combo_sigmoid: bool = False

    def validate(self) -> None:
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"unknown fusion {self.fusion!r}; choose from {FUSIONS}")
        if self.upsampling not in UPSAMPLINGS:
            raise ConfigurationError(f"unknown upsampling {self.upsampling!r}; choose from {UPSAMPLINGS}")
        if self.lateral_channels < 1 or self.reduction < 1:
            raise ConfigurationError(
                f"lateral_channels and reduction must be positive, got "
                f"{self.lateral_channels} and {self.reduction}"
            )
        if (2 * self.lateral_channels) % self.reduction != 0:
            raise ConfigurationError(
                f"2 * lateral_channels ({2 * self.lateral_channels}) must be divisible by "
                f"reduction {self.reduction}"
            )


def default_lateral_width(family: str) -> int:
    return 256 if family == "imagenet" else 64


@dataclass
class MergeRecord:
    """Attention observables of one merge, for introspection."""

    level: int
    s_spa: Optional[Tensor] = None
    s_sem: Optional[Tensor] = None
    m_spa: Optional[Tensor] = None
    m_sem: Optional[Tensor] = None


class CompetitiveAttention(Module):
    """Channel gates from the pooled descriptors of both fusion inputs."""

    def __init__(self, channels: int, reduction: int, *, rng, dtype):
        super().__init__()
        self.channels = channels
        hidden = (2 * channels) // reduction
        self.w1 = Linear(2 * channels, hidden, bias=False, rng=rng, dtype=dtype)
        self.w2 = Linear(hidden, 2 * channels, bias=False, rng=rng, dtype=dtype)
        self.force_ones = False

    def forward(self, xl: Tensor, xu: Tensor) -> Tuple[Tensor, Tensor]:
        c = self.channels
        if self.force_ones:
            ones = Tensor(np.ones((xl.shape[0], c), dtype=xl.dtype))
            return ones, ones
        u = ops.concat([ops.global_avg_pool(xl), ops.global_avg_pool(xu)], axis=1)
        s = ops.sigmoid(self.w2(ops.relu(self.w1(u))))
        return ops.narrow(s, 1, 0, c), ops.narrow(s, 1, c, c)


class SpatialRecalibration(Module):
    """Per-pixel gates from the cross-channel means of both fusion inputs."""

    def __init__(self, *, rng, dtype):
        super().__init__()
        self.conv3x3 = Conv2d(2, 2, 3, stride=2, pad=1, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(2, dtype=dtype)
        self.conv1x1_scale = Conv2d(2, 2, 1, bias=True, rng=rng, dtype=dtype)
        self.force_ones = False

    def forward(self, xl: Tensor, xu: Tensor) -> Tuple[Tensor, Tensor]:
        h, w = xl.shape[2], xl.shape[3]
        if h % 2 or w % 2:
            raise ConfigurationError(f"spatial recalibration requires even extents, got {h}x{w}")
        if self.force_ones:
            ones = Tensor(np.ones((xl.shape[0], 1, h, w), dtype=xl.dtype))
            return ones, ones
        s = ops.concat([ops.cross_channel_mean(xl), ops.cross_channel_mean(xu)], axis=1)
        m = ops.sigmoid(self.conv1x1_scale(ops.bilinear_resize(self.bn(self.conv3x3(s)))))
        return ops.narrow(m, 1, 0, 1), ops.narrow(m, 1, 1, 1)


def fuse_plain(xl: Tensor, xu: Tensor, level: Optional[int] = None) -> Tensor:
    if xl.shape != xu.shape:
        where = f" at level {level}" if level is not None else ""
        raise ShapeError(f"fusion inputs differ{where}: {xl.shape} vs {xu.shape}")
    return xl + xu


class FusionMerge(Module):
    """One fusion site; owns the attention parameters for its level."""

    def __init__(self, level: int, channels: int, cfg: PyramidConfig, *, rng, dtype):
        super().__init__()
        self.level = level
        self.fusion = cfg.fusion
        self.extra_combo_sigmoid = cfg.extra_combo_sigmoid
        if cfg.fusion in ("ca", "srr_ca"):
            self.ca = CompetitiveAttention(channels, cfg.reduction, rng=rng, dtype=dtype)
        if cfg.fusion in ("srr", "srr_ca"):
            self.srr = SpatialRecalibration(rng=rng, dtype=dtype)
        if cfg.fusion == "srr_ca":
            self.combo_conv_l = Conv2d(channels, channels, 1, bias=False, rng=rng, dtype=dtype)
            self.combo_bn_l = BatchNorm2d(channels, dtype=dtype)
            self.combo_conv_u = Conv2d(channels, channels, 1, bias=False, rng=rng, dtype=dtype)
            self.combo_bn_u = BatchNorm2d(channels, dtype=dtype)

    def forward(self, xl: Tensor, xu: Tensor) -> Tuple[MergeRecord, Tensor]:
        if xl.shape != xu.shape:
            raise ShapeError(f"fusion inputs differ at level {self.level}: {xl.shape} vs {xu.shape}")
        record = MergeRecord(level=self.level)
        if self.fusion == "plain":
            return record, xl + xu
        if self.fusion == "ca":
            record.s_spa, record.s_sem = self.ca(xl, xu)
            return record, ops.channel_scale(xl, record.s_spa) + ops.channel_scale(xu, record.s_sem)
        if self.fusion == "srr":
            record.m_spa, record.m_sem = self.srr(xl, xu)
            return record, ops.mul(xl, record.m_spa) + ops.mul(xu, record.m_sem)
        # srr_ca
        record.s_spa, record.s_sem = self.ca(xl, xu)
        record.m_spa, record.m_sem = self.srr(xl, xu)
        yl = self.combo_bn_l(self.combo_conv_l(ops.channel_scale(ops.mul(xl, record.m_spa), record.s_spa)))
        yu = self.combo_bn_u(self.combo_conv_u(ops.channel_scale(ops.mul(xu, record.m_sem), record.s_sem)))
        if self.extra_combo_sigmoid:
            yl, yu = ops.sigmoid(yl), ops.sigmoid(yu)
        return record, yl + yu


class Pyramid(Module):
    """Laterals + top-down pathway over an ordered (fine -> coarse) level list.

    The coarsest level passes through its lateral projection unfused; every
    finer level receives the upsampled previous output and fuses it with its
    lateral.  A pyramid over L levels performs L - 1 merges.
    """

    def __init__(self, stage_channels: Tuple[int, ...], cfg: PyramidConfig, *, rng, dtype=np.float64):
        super().__init__()
        cfg.validate()
        if len(stage_channels) < 2:
            raise ConfigurationError(f"a pyramid needs at least 2 levels, got {len(stage_channels)}")
        self.cfg = cfg
        self.num_levels = len(stage_channels)
        cd = cfg.lateral_channels
        for i, c in enumerate(stage_channels):
            setattr(self, f"lateral{i + 1}", Conv2d(c, cd, 1, bias=True, rng=rng, dtype=dtype))
        for i in range(1, self.num_levels):
            setattr(self, f"merge{i}", FusionMerge(i, cd, cfg, rng=rng, dtype=dtype))
        if cfg.upsampling == "deconvolution":
            for i in range(1, self.num_levels):
                setattr(self, f"up{i}", ConvTranspose2d(cd, cd, 4, stride=2, pad=1, bias=True, rng=rng, dtype=dtype))

    def project_laterals(self, levels: List[Tensor]) -> List[Tensor]:
        if len(levels) != self.num_levels:
            raise ShapeError(f"expected {self.num_levels} levels, got {len(levels)}")
        return [getattr(self, f"lateral{i + 1}")(f) for i, f in enumerate(levels)]

    def top_down_step(self, x: Tensor, target_level: int) -> Tensor:
        if self.cfg.upsampling == "bilinear":
            return ops.bilinear_resize(x)
        if self.cfg.upsampling == "nearest":
            return ops.nearest_resize(x)
        return getattr(self, f"up{target_level}")(x)

    def forward(self, levels: List[Tensor]) -> Tuple[List[Tensor], List[MergeRecord]]:
        laterals = self.project_laterals(levels)
        outputs: List[Optional[Tensor]] = [None] * self.num_levels
        outputs[-1] = laterals[-1]
        records: List[MergeRecord] = []
        for i in range(self.num_levels - 2, -1, -1):
            xu = self.top_down_step(outputs[i + 1], target_level=i + 1)
            record, fused = getattr(self, f"merge{i + 1}")(laterals[i], xu)
            outputs[i] = fused
            records.append(record)
        records.reverse()
        return outputs, records
