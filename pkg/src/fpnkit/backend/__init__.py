"""Kernel backend selection.

The convolution lowering kernels exist twice: a compiled Cython extension
(``_ckernels``) and a pure-numpy fallback (``py_kernels``).  The compiled one
is picked at import when available; ``FPNKIT_BACKEND=numpy|cython`` overrides,
and :func:`set_backend` switches at runtime (used by the benchmark and the
backend-equivalence tests).  Both produce bit-identical results.
"""

import os

import numpy as np

from . import py_kernels

_backends = {"numpy": py_kernels}
try:
    from . import _ckernels

    _backends["cython"] = _ckernels
except ImportError:
    _ckernels = None


def available_backends():
    return sorted(_backends)


def get_backend(name: str):
    try:
        return _backends[name]
    except KeyError:
        raise KeyError(f"unknown backend {name!r}; available: {available_backends()}") from None


def _initial():
    requested = os.environ.get("FPNKIT_BACKEND", "auto").lower()
    if requested == "auto":
        return _backends.get("cython", py_kernels)
    return get_backend(requested)


_active = _initial()


def set_backend(name: str) -> None:
    global _active
    _active = get_backend(name)


def active_name() -> str:
    return _active.name


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    return _active.im2col(xp, kh, kw, stride)


def col2im(cols: np.ndarray, hp: int, wp: int, kh: int, kw: int, stride: int) -> np.ndarray:
    return _active.col2im(cols, hp, wp, kh, kw, stride)
