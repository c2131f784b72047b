"""Pure-numpy versions of the convolution lowering kernels.

These are the fallback for the compiled extension.  Both backends must be
bit-identical: accumulation in ``col2im`` runs in ascending kernel-offset
order ``(i, j)`` for every output element, matching the loop order of the
Cython kernels exactly.
"""

import numpy as np

name = "numpy"


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Lower a padded N x C x Hp x Wp batch into N x (C*kh*kw) x (OH*OW) columns."""
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols: np.ndarray, hp: int, wp: int, kh: int, kw: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to N x C x Hp x Wp."""
    n = cols.shape[0]
    c = cols.shape[1] // (kh * kw)
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return xp
