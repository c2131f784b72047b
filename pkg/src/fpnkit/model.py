"""Backbone + pyramid + classification head, and checkpoint plumbing.

The head pools every pyramid output (global average), concatenates the pooled
vectors (or sums them for the ``sum_gap`` variant) and applies one fully
connected layer to produce K logits.

Checkpoints are named TAR0 streams: one record per parameter/buffer under its
'/'-joined module path, plus a numeric ``meta/model`` record that encodes the
architecture so a checkpoint can be rebuilt without side information.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import ops, tario
from .backbone import Backbone, BackboneSpec
from .errors import ConfigurationError
from .nn import Linear, Module
from .pyramid import FUSIONS, UPSAMPLINGS, MergeRecord, Pyramid, PyramidConfig, default_lateral_width
from .tensor import Tensor

MODEL_NAMES = ("fpn", "fpn-ca", "fpn-srr", "fpn-srr-ca")
_FUSION_BY_NAME = dict(zip(MODEL_NAMES, FUSIONS))
_HEADS = ("concat_gap", "sum_gap")
_FAMILIES = ("imagenet", "cifar", "custom")


@dataclass
class ModelSpec:
    backbone: BackboneSpec
    pyramid: PyramidConfig
    num_classes: int
    head: str = "concat_gap"

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.num_classes}")
        if self.head not in _HEADS:
            raise ConfigurationError(f"unknown head {self.head!r}; choose from {_HEADS}")
        self.pyramid.validate()


@dataclass
class TraceBundle:
    """Everything observable from one forward pass."""

    level_features: List[Tensor]
    pyramid_outputs: List[Tensor]
    merges: List[MergeRecord]


class PyramidClassifier(Module):
    def __init__(self, spec: ModelSpec, *, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.backbone = Backbone(spec.backbone, rng=rng, dtype=dtype)
        self.pyramid = Pyramid(spec.backbone.stage_channels, spec.pyramid, rng=rng, dtype=dtype)
        cd = spec.pyramid.lateral_channels
        head_in = cd * spec.backbone.num_levels if spec.head == "concat_gap" else cd
        self.fc = Linear(head_in, spec.num_classes, bias=True, rng=rng, dtype=dtype)

    def forward_traced(self, x: Tensor) -> Tuple[Tensor, TraceBundle]:
        levels = self.backbone(x)
        outputs, records = self.pyramid(levels)
        pooled = [ops.global_avg_pool(o) for o in outputs]
        if self.spec.head == "concat_gap":
            h = ops.concat(pooled, axis=1)
        else:
            h = pooled[0]
            for p in pooled[1:]:
                h = h + p
        logits = self.fc(h)
        return logits, TraceBundle(levels, outputs, records)

    def forward(self, x: Tensor) -> Tensor:
        logits, _ = self.forward_traced(x)
        return logits


def count_parameters(module: Module) -> int:
    """Number of learnable scalars (conv/FC weights and biases, BN affine)."""
    return sum(p.data.size for _, p in module.named_parameters())


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float64) -> PyramidClassifier:
    rng = np.random.default_rng(seed)
    return PyramidClassifier(spec, rng=rng, dtype=np.dtype(dtype))


def build_named_model(
    name: str,
    depth: int,
    num_classes: int,
    upsampling: str = "bilinear",
    lateral_channels: Optional[int] = None,
    reduction: int = 16,
    seed: int = 0,
    dtype=np.float64,
    head: str = "concat_gap",
) -> PyramidClassifier:
    """Build one of the CLI model variants: fpn, fpn-ca, fpn-srr, fpn-srr-ca."""
    if name not in _FUSION_BY_NAME:
        raise ConfigurationError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
    backbone = BackboneSpec.from_depth(depth)
    cd = lateral_channels if lateral_channels is not None else default_lateral_width(backbone.family)
    pyramid = PyramidConfig(
        lateral_channels=cd,
        upsampling=upsampling,
        fusion=_FUSION_BY_NAME[name],
        reduction=reduction,
    )
    spec = ModelSpec(backbone=backbone, pyramid=pyramid, num_classes=num_classes, head=head)
    return build_model(spec, seed=seed, dtype=dtype)


def model_name_for_fusion(fusion: str) -> str:
    for name, f in _FUSION_BY_NAME.items():
        if f == fusion:
            return name
    raise ConfigurationError(f"unknown fusion {fusion!r}")


# ---------------------------------------------------------------------------
# checkpoint meta encoding
# ---------------------------------------------------------------------------

META_KEY = "meta/model"
META_PREFIX = "meta/"


def spec_to_meta(spec: ModelSpec) -> np.ndarray:
    b, p = spec.backbone, spec.pyramid
    vec = [
        _FAMILIES.index(b.family),
        b.depth or 0,
        b.input_size,
        b.stem_channels,
        len(b.stage_channels),
        *b.stage_channels,
        *b.blocks_per_stage,
        p.lateral_channels,
        UPSAMPLINGS.index(p.upsampling),
        FUSIONS.index(p.fusion),
        p.reduction,
        int(p.extra_combo_sigmoid),
        spec.num_classes,
        _HEADS.index(spec.head),
    ]
    return np.asarray(vec, dtype=np.float64)


def spec_from_meta(vec: np.ndarray) -> ModelSpec:
    v = [int(round(x)) for x in np.asarray(vec).ravel()]
    family = _FAMILIES[v[0]]
    depth = v[1] or None
    input_size, stem_channels, n = v[2], v[3], v[4]
    stages = tuple(v[5 : 5 + n])
    blocks = tuple(v[5 + n : 5 + 2 * n])
    rest = v[5 + 2 * n :]
    backbone = BackboneSpec(
        family=family,
        stage_channels=stages,
        blocks_per_stage=blocks,
        input_size=input_size,
        stem_channels=stem_channels,
        depth=depth,
    )
    pyramid = PyramidConfig(
        lateral_channels=rest[0],
        upsampling=UPSAMPLINGS[rest[1]],
        fusion=FUSIONS[rest[2]],
        reduction=rest[3],
        extra_combo_sigmoid=bool(rest[4]),
    )
    return ModelSpec(backbone=backbone, pyramid=pyramid, num_classes=rest[5], head=_HEADS[rest[6]])


def save_checkpoint(model: PyramidClassifier, path, extra_meta: Optional[dict] = None) -> None:
    """Write architecture meta + state; ``extra_meta`` lands under ``meta/``."""
    records = {META_KEY: spec_to_meta(model.spec)}
    for name, arr in (extra_meta or {}).items():
        records[META_PREFIX + name] = np.asarray(arr, dtype=np.float64)
    records.update(model.state_dict())
    tario.save_named(path, records)


def _split_meta(records: dict) -> dict:
    meta = {k: records.pop(k) for k in [k for k in records if k.startswith(META_PREFIX)]}
    return meta


def load_checkpoint_meta(path) -> dict:
    return _split_meta(tario.load_named(path))


def load_checkpoint(path) -> PyramidClassifier:
    """Rebuild the architecture from the meta record and restore its state."""
    records = tario.load_named(path)
    meta = _split_meta(records)
    if META_KEY not in meta:
        raise ConfigurationError(f"checkpoint {path} lacks a {META_KEY} record")
    spec = spec_from_meta(meta[META_KEY])
    dtype = next(iter(records.values())).dtype if records else np.float64
    model = build_model(spec, seed=0, dtype=dtype)
    model.load_state_dict(records, strict=True)
    return model


def load_state_into(model: PyramidClassifier, path, strict: bool = True) -> None:
    records = tario.load_named(path)
    _split_meta(records)
    model.load_state_dict(records, strict=strict)
