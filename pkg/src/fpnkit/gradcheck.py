"""Finite-difference verification of analytic gradients.

Checks every differentiable op on small random instances and each model
variant on a toy architecture, comparing backward results against central
differences (h = 1e-5, float64).  A check passes when the worst relative
error stays below 1e-4.  Models are checked in eval mode so batch-norm
statistics stay fixed while parameters are perturbed.

Piecewise-linear points (ReLU, max-pool ties) can sit closer to zero than
the default step reaches, in which case the two-sided evaluation straddles
the kink and the estimate, not the gradient, is wrong.  Elements that
disagree at the default step are therefore re-measured once with a 100x
smaller step: a kink artifact disappears, a genuine backward bug persists
at every step size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import ops
from .backbone import BackboneSpec
from .errors import ConfigurationError
from .model import MODEL_NAMES, ModelSpec, build_model
from .nn import BatchNorm2d, Module
from .pyramid import PyramidConfig
from .tensor import Tensor, no_grad

THRESHOLD = 1e-4
STEP = 1e-5


def _fd_element(f: Callable[[], float], flat: np.ndarray, i: int, h: float) -> float:
    original = flat[i]
    flat[i] = original + h
    fp = f()
    flat[i] = original - h
    fm = f()
    flat[i] = original
    return (fp - fm) / (2.0 * h)


def finite_difference_grad(f: Callable[[], float], array: np.ndarray, h: float = STEP) -> np.ndarray:
    grad = np.zeros_like(array)
    flat = array.ravel()
    out = grad.ravel()
    for i in range(flat.size):
        out[i] = _fd_element(f, flat, i, h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


@dataclass
class GradCheckResult:
    name: str
    max_error: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.max_error < THRESHOLD


def _check_leaves(build_loss: Callable[[], Tensor], leaves: List[Tuple[str, Tensor]]) -> Tuple[float, str]:
    for _, leaf in leaves:
        leaf.zero_grad()
    build_loss().backward()
    worst, worst_name = 0.0, ""
    for name, leaf in leaves:
        analytic = leaf.grad.copy()
        with no_grad():
            evaluate = lambda: build_loss().item()
            numeric = finite_difference_grad(evaluate, leaf.data)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
            flat_num = numeric.ravel()
            flat_data = leaf.data.ravel()
            for i in np.flatnonzero((np.abs(analytic - numeric) / denom).ravel() >= THRESHOLD):
                flat_num[i] = _fd_element(evaluate, flat_data, int(i), STEP / 100.0)
        err = max_relative_error(analytic, numeric)
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name


# ---------------------------------------------------------------------------
# per-op checks
# ---------------------------------------------------------------------------


def _op_cases(rng: np.random.Generator):
    def leaf(shape, scale=1.0):
        return Tensor(scale * rng.normal(size=shape), requires_grad=True)

    x = leaf((2, 3, 6, 6))
    w = leaf((4, 3, 3, 3))
    b = leaf((4,))
    yield "conv2d", lambda: ops.sum_all(ops.sigmoid(ops.conv2d(x, w, b, stride=2, pad=1))), [
        ("x", x), ("w", w), ("b", b)]

    xt = leaf((1, 2, 3, 3))
    wt = leaf((2, 3, 4, 4))
    bt = leaf((3,))
    yield "transposed_conv2d", lambda: ops.sum_all(ops.sigmoid(ops.transposed_conv2d(xt, wt, bt))), [
        ("x", xt), ("w", wt), ("b", bt)]

    xr = leaf((2, 2, 3, 4))
    yield "bilinear_resize", lambda: ops.sum_all(ops.sigmoid(ops.bilinear_resize(xr))), [("x", xr)]
    yield "nearest_resize", lambda: ops.sum_all(ops.sigmoid(ops.nearest_resize(xr))), [("x", xr)]

    xg = leaf((2, 3, 4, 4))
    yield "global_avg_pool", lambda: ops.sum_all(ops.sigmoid(ops.global_avg_pool(xg))), [("x", xg)]
    yield "cross_channel_mean", lambda: ops.sum_all(ops.sigmoid(ops.cross_channel_mean(xg))), [("x", xg)]

    xm = Tensor(rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8), requires_grad=True)
    yield "max_pool2d", lambda: ops.sum_all(ops.sigmoid(ops.max_pool2d(xm))), [("x", xm)]

    xb = leaf((3, 2, 4, 4))
    gamma = Tensor(rng.uniform(0.5, 1.5, size=2), requires_grad=True)
    beta = leaf((2,))
    rm = rng.normal(size=2)
    rv = rng.uniform(0.5, 2.0, size=2)
    for mode, training in (("train", True), ("eval", False)):
        yield (
            f"batch_norm_{mode}",
            lambda training=training: ops.sum_all(
                ops.sigmoid(ops.batch_norm(xb, gamma, beta, rm.copy(), rv.copy(), training=training))
            ),
            [("x", xb), ("gamma", gamma), ("beta", beta)],
        )

    xa = Tensor(rng.normal(size=(3, 3)) + 0.2 * np.sign(rng.normal(size=(3, 3))), requires_grad=True)
    yield "relu", lambda: ops.sum_all(ops.sigmoid(ops.relu(xa))), [("x", xa)]
    yield "sigmoid", lambda: ops.sum_all(ops.sigmoid(xa)), [("x", xa)]

    xf = leaf((3, 4))
    wf = leaf((2, 4))
    bf = leaf((2,))
    yield "fully_connected", lambda: ops.sum_all(ops.sigmoid(ops.fully_connected(xf, wf, bf))), [
        ("x", xf), ("w", wf), ("b", bf)]

    logits = leaf((4, 5))
    targets = rng.dirichlet(np.ones(5), size=4)
    yield "softmax_cross_entropy", lambda: ops.softmax_cross_entropy(logits, targets), [("logits", logits)]

    x1 = leaf((2, 3, 4, 4))
    m1 = leaf((2, 1, 4, 4))
    s1 = leaf((2, 3))
    yield "broadcast_mul", lambda: ops.sum_all(
        ops.sigmoid(ops.add(ops.mul(x1, m1), ops.channel_scale(x1, s1)))
    ), [("x", x1), ("m", m1), ("s", s1)]


def check_ops(seed: int = 0) -> List[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, build_loss, leaves in _op_cases(rng):
        err, worst = _check_leaves(build_loss, leaves)
        results.append(GradCheckResult(f"op/{name}", err, worst))
    return results


# ---------------------------------------------------------------------------
# whole-model checks on toy architectures
# ---------------------------------------------------------------------------


def toy_model_spec(fusion: str, num_classes: int = 5) -> ModelSpec:
    """A tiny 3-level model (input 2x3x16x16, width 8, reduction 2) that keeps
    exhaustive finite differences affordable."""
    backbone = BackboneSpec.custom(stage_channels=(4, 6, 8), blocks_per_stage=(1, 1, 1), input_size=16)
    pyramid = PyramidConfig(lateral_channels=8, upsampling="bilinear", fusion=fusion, reduction=2)
    return ModelSpec(backbone=backbone, pyramid=pyramid, num_classes=num_classes)


def _randomize_inert_state(model: Module, rng: np.random.Generator) -> None:
    """Move BN running stats and biases off their init values so the checked
    gradients flow through generic, not degenerate, paths."""
    for name, param in model.named_parameters():
        if name.endswith("/b") or name.endswith("/beta"):
            param.data += 0.1 * rng.normal(size=param.shape)
    stack = [model]
    while stack:
        mod = stack.pop()
        if isinstance(mod, BatchNorm2d):
            mod.running_mean[...] = 0.2 * rng.normal(size=mod.running_mean.shape)
            mod.running_var[...] = rng.uniform(0.6, 1.6, size=mod.running_var.shape)
        stack.extend(child for _, child in mod._children())
    model.eval()


def check_model_variant(model_name: str, seed: int = 0) -> GradCheckResult:
    if model_name not in MODEL_NAMES:
        raise ConfigurationError(f"unknown model {model_name!r}; choose from {MODEL_NAMES}")
    fusion = dict(zip(MODEL_NAMES, ("plain", "ca", "srr", "srr_ca")))[model_name]
    rng = np.random.default_rng(seed + 17)
    model = build_model(toy_model_spec(fusion), seed=seed, dtype=np.float64)
    _randomize_inert_state(model, rng)

    x = Tensor(rng.normal(size=(2, 3, 16, 16)))
    targets = np.eye(5)[rng.integers(0, 5, size=2)]

    def build_loss() -> Tensor:
        return ops.softmax_cross_entropy(model(x), targets)

    err, worst = _check_leaves(build_loss, list(model.named_parameters()))
    return GradCheckResult(f"model/{model_name}", err, worst)


def run_gradcheck(target: Optional[str] = None, seed: int = 0) -> List[GradCheckResult]:
    """target: None/'all', 'ops', or one of the model names."""
    results: List[GradCheckResult] = []
    if target in (None, "all", "ops"):
        results.extend(check_ops(seed))
    if target in (None, "all"):
        for name in MODEL_NAMES:
            results.append(check_model_variant(name, seed))
    elif target in MODEL_NAMES:
        results.append(check_model_variant(target, seed))
    elif target not in ("ops",):
        raise ConfigurationError(f"unknown gradcheck target {target!r}; use 'ops', 'all' or {MODEL_NAMES}")
    return results
