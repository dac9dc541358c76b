"""Pure-numpy versions of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature and
the same floating-point summation order, so the two backends agree bit for bit.
All arrays are channel-last: ``(N, H, W, C)``. Inputs to the window kernels are
already zero-padded.
"""

import numpy as np


def im2col(xp, k, stride, out_h, out_w):
    """Gather k*k windows of a padded batch into rows ordered (ki, kj, c)."""
    n, _, _, c = xp.shape
    cols = np.empty((n, out_h, out_w, k, k, c), dtype=xp.dtype)
    hs = stride * (out_h - 1) + 1
    ws = stride * (out_w - 1) + 1
    for ki in range(k):
        for kj in range(k):
            cols[:, :, :, ki, kj, :] = xp[:, ki:ki + hs:stride, kj:kj + ws:stride, :]
    return cols.reshape(n * out_h * out_w, k * k * c)


def col2im(cols, padded_shape, k, stride, out_h, out_w):
    """Adjoint of :func:`im2col`; accumulates in (ki, kj) order."""
    n, _, _, c = padded_shape
    cols = cols.reshape(n, out_h, out_w, k, k, c)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    hs = stride * (out_h - 1) + 1
    ws = stride * (out_w - 1) + 1
    for ki in range(k):
        for kj in range(k):
            out[:, ki:ki + hs:stride, kj:kj + ws:stride, :] += cols[:, :, :, ki, kj, :]
    return out


def box_sum(xp, k, stride, out_h, out_w):
    """Per-channel sum over each k*k window (depthwise conv with a ones kernel)."""
    n, _, _, c = xp.shape
    out = np.zeros((n, out_h, out_w, c), dtype=xp.dtype)
    hs = stride * (out_h - 1) + 1
    ws = stride * (out_w - 1) + 1
    for ki in range(k):
        for kj in range(k):
            out += xp[:, ki:ki + hs:stride, kj:kj + ws:stride, :]
    return out


def box_sum_adjoint(g, padded_shape, k, stride):
    """Scatter each output gradient back onto every input site of its window."""
    _, out_h, out_w, _ = g.shape
    out = np.zeros(padded_shape, dtype=g.dtype)
    hs = stride * (out_h - 1) + 1
    ws = stride * (out_w - 1) + 1
    for ki in range(k):
        for kj in range(k):
            out[:, ki:ki + hs:stride, kj:kj + ws:stride, :] += g
    return out


def ic_combine(u, r, alpha, b1, b2):
    """Return ``u + alpha * relu(u - r + b1) + b2`` and the relu gate.

    ``b1``/``b2`` are per-channel vectors (zeros when the layer has no bias).
    The gate is True where the branch is strictly positive.
    """
    h = u - r
    h += b1
    gate = h > 0
    branch = np.where(gate, h, 0)
    out = branch * alpha
    out += u
    out += b2
    return out, branch, gate
