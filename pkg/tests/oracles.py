"""Independent reference evaluators used as test oracles.

These are deliberately naive (explicit loops, no shared code with the package)
so they stay a separate route to the same numbers.
"""

import math

import numpy as np


def conv2d_loops(x, w, stride, padding):
    """Quadruple-nested-loop convolution of one (H, W, C') map with a (k, k, C', C) kernel."""
    h, wd, cin = x.shape
    k, _, _, cout = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            for o in range(cout):
                acc = 0.0
                for di in range(k):
                    for dj in range(k):
                        r = i * stride + di - padding
                        c = j * stride + dj - padding
                        if 0 <= r < h and 0 <= c < wd:
                            for ci in range(cin):
                                acc += x[r, c, ci] * w[di, dj, ci, o]
                out[i, j, o] = acc
    return out


def ic_neuron_literal(x, w, w_prime, b1, b2, f):
    """Scalar IC neuron written term by term from its defining formula."""
    lin = sum(wi * xi for wi, xi in zip(w, x))
    xsum = sum(x)
    inner = lin - w_prime * xsum + b1
    return f(lin + max(inner, 0.0) + b2)


def softmax_literal(logits, tau):
    e = [math.exp(s / tau) for s in logits]
    z = sum(e)
    return [v / z for v in e]


def finite_diff(f, x, eps=1e-6):
    """Central differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g
