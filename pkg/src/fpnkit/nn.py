"""Layers and parameter containers.

A :class:`Module` discovers its parameters and children by walking instance
attributes in insertion order, which makes parameter enumeration, checkpoint
names and optimizer state deterministic.  Checkpoint paths join attribute
names with '/'.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Tuple

import numpy as np

from . import ops
from .errors import ConfigurationError
from .tensor import Tensor


class Module:
    def __init__(self):
        self.training = True
        self._buffer_names: list = []

    # -- attribute walks ----------------------------------------------------

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}/")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}/")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        setattr(self, name, array)
        self._buffer_names.append(name)

    # -- state --------------------------------------------------------------

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_dict(self, state, strict: bool = True) -> None:
        """Copy arrays into existing parameters/buffers (identity preserved)."""
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if strict and (missing or unexpected):
            raise ConfigurationError(
                f"state mismatch: missing {missing or 'none'}, unexpected {unexpected or 'none'}"
            )
        for name, target in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise ConfigurationError(
                    f"state {name!r} has shape {value.shape}, expected {target.shape}"
                )
            target[...] = value

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# ---------------------------------------------------------------------------
# initialization helpers
# ---------------------------------------------------------------------------


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        pad: int = 0,
        bias: bool = True,
        *,
        rng: np.random.Generator,
        dtype=np.float64,
    ):
        super().__init__()
        self.stride = stride
        self.pad = pad
        fan_in = in_channels * kernel * kernel
        self.w = he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        self.b = zeros_param((out_channels,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    """Learnable x2 upsampling (4x4 kernel, stride 2, pad 1 by default)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 4,
        stride: int = 2,
        pad: int = 1,
        bias: bool = True,
        *,
        rng: np.random.Generator,
        dtype=np.float64,
    ):
        super().__init__()
        self.stride = stride
        self.pad = pad
        fan_in = in_channels * kernel * kernel
        self.w = he_normal(rng, (in_channels, out_channels, kernel, kernel), fan_in, dtype)
        self.b = zeros_param((out_channels,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.transposed_conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, *, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = ones_param((channels,), dtype)
        self.beta = zeros_param((channels,), dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, *, rng, dtype=np.float64):
        super().__init__()
        self.w = he_normal(rng, (out_features, in_features), in_features, dtype)
        self.b = zeros_param((out_features,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.w, self.b)


# ---------------------------------------------------------------------------
# exact-passthrough helpers (used by reduction-identity checks)
# ---------------------------------------------------------------------------


def set_bn_passthrough(bn: BatchNorm2d) -> None:
    """Configure a BatchNorm2d so its eval-mode forward is bit-identical to
    the input: gamma=1, beta=0, mean=0 and running_var + eps == 1 exactly."""
    bn.gamma.data[...] = 1.0
    bn.beta.data[...] = 0.0
    bn.running_mean[...] = 0.0
    bn.running_var[...] = 1.0 - bn.eps
    if not np.all(bn.running_var + bn.eps == 1.0):
        raise ConfigurationError(f"eps {bn.eps} does not admit an exact passthrough variance")


def set_conv_identity(conv: Conv2d) -> None:
    """Make a 1x1 same-width convolution the identity map."""
    cout, cin, kh, kw = conv.w.shape
    if cout != cin or kh != 1 or kw != 1:
        raise ConfigurationError(f"identity requires a square 1x1 conv, got weight {conv.w.shape}")
    conv.w.data[...] = np.eye(cout, dtype=conv.w.dtype)[:, :, None, None]
    if conv.b is not None:
        conv.b.data[...] = 0.0
