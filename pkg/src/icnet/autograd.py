"""Define-by-run reverse-mode differentiation on numpy arrays.

Every op returns a :class:`Variable`. When any input requires a gradient the
result remembers its parents and a backward rule; calling
:meth:`Variable.backward` on a scalar walks that record once in reverse
topological order, accumulates into leaf ``.grad`` buffers and then releases
the record. A second ``backward`` on the same loss raises.

ReLU-style ops use the subgradient 0 at the kink.
"""

import contextlib
from dataclasses import dataclass, field

import numpy as np

from icnet import kernels
from icnet.tensor_core import (
    NonFiniteError,
    ShapeError,
    conv2d_with_cols,
    depthwise_ones_raw,
    pointwise_raw,
    unpad_hw,
)

_grad_enabled = True
_kink_log = None


class ConsumedGraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording (frozen teachers, evaluation loops)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Variable:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, value, requires_grad=False, name=None):
        if isinstance(value, Variable):
            value = value.value
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Variable{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        backward(self, grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Variable):
            raise TypeError("division by a Variable is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype=None):
    if isinstance(x, Variable):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Variable(arr)


def _make(value, parents, backward_fn):
    out = Variable(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, grad=None):
    """Populate ``.grad`` of every leaf that requires it with d(loss)/d(leaf)."""
    if loss._consumed:
        raise ConsumedGraphError("backward called twice on the same computation record")
    if grad is None:
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.value)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._consumed = True
        node._backward = None
        node._parents = ()


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    av, bv = a.value, b.value

    def bw(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(av * bv, (a, b), bw)


def scale(x, c):
    x = _wrap(x)
    c = x.dtype.type(c)
    return _make(x.value * c, (x,), lambda g: (g * c,))


def bias_add(x, b):
    """Broadcast a per-channel vector over the trailing axis."""
    x, b = _wrap(x), _wrap(b)
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias of shape {b.shape} does not match {x.shape[-1]} channels")
    axes = tuple(range(x.value.ndim - 1))
    return _make(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=axes)))


def _log_kink(x, threshold):
    if _kink_log is not None:
        _kink_log.append(x > threshold)


def relu(x):
    x = _wrap(x)
    _log_kink(x.value, 0)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0), (x,), lambda g: (g * mask,))


def maximum(x, c):
    """Elementwise max with a constant; gradient flows only where x > c."""
    x = _wrap(x)
    c = x.dtype.type(c)
    _log_kink(x.value, c)
    mask = x.value > c
    return _make(np.where(mask, x.value, c), (x,), lambda g: (g * mask,))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def sum(x, axis=None):
    x = _wrap(x)
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.value, axis=axis), (x,), bw)


def mean(x, axis=None):
    x = _wrap(x)
    n = x.value.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def reshape(x, shape):
    x = _wrap(x)
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x):
    x = _wrap(x)
    return reshape(x, (x.shape[0], -1))


def _as_batch(x):
    if x.ndim != 4:
        raise ShapeError(f"expected a batch (N, H, W, C), got shape {x.shape}")


def conv2d(x, w, geom):
    x, w = _wrap(x), _wrap(w)
    _as_batch(x)
    k = geom.kernel_size
    if w.shape != (k, k, geom.in_channels, geom.out_channels):
        raise ShapeError(f"kernel shape {w.shape} does not match geometry")
    if x.shape[-1] != geom.in_channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, geometry expects {geom.in_channels}")
    out, cols = conv2d_with_cols(x.value, w.value, geom)
    n, oh, ow, c = out.shape
    w2 = w.value.reshape(-1, c)
    padded_shape = (x.shape[0], x.shape[1] + 2 * geom.padding, x.shape[2] + 2 * geom.padding, x.shape[3])

    def bw(g):
        g2 = g.reshape(-1, c)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ w2.T
            gx = unpad_hw(kernels.col2im(gcols, padded_shape, k, geom.stride, oh, ow), geom.padding)
        return gx, gw

    return _make(out, (x, w), bw)


def depthwise_ones(x, geom):
    """All-ones depthwise convolution; the kernel is a constant."""
    x = _wrap(x)
    _as_batch(x)
    if x.shape[-1] != geom.in_channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, geometry expects {geom.in_channels}")
    out = depthwise_ones_raw(x.value, geom)
    p = geom.padding
    padded_shape = (x.shape[0], x.shape[1] + 2 * p, x.shape[2] + 2 * p, x.shape[3])

    def bw(g):
        if geom.kernel_size == 1 and geom.stride == 1 and p == 0:
            return (g,)
        g = np.ascontiguousarray(g)
        return (unpad_hw(kernels.box_sum_adjoint(g, padded_shape, geom.kernel_size, geom.stride), p),)

    return _make(out, (x,), bw)


def pointwise(s, wp):
    """Recalibrate channels of ``s`` by the columns of ``wp`` (a 1x1 convolution)."""
    s, wp = _wrap(s), _wrap(wp)
    if wp.ndim != 2 or s.shape[-1] != wp.shape[0]:
        raise ShapeError(f"cannot recalibrate {s.shape[-1]} channels with weights {wp.shape}")
    sv, wv = s.value, wp.value
    s2 = sv.reshape(-1, sv.shape[-1])

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gs = (g2 @ wv.T).reshape(sv.shape) if s.requires_grad else None
        gw = s2.T @ g2 if wp.requires_grad else None
        return gs, gw

    return _make(pointwise_raw(sv, wv), (s, wp), bw)


def ic_combine(u, r, alpha, b1=None, b2=None):
    """Fused ``u + alpha * relu(u - r + b1) + b2`` with per-channel biases."""
    u, r, alpha = _wrap(u), _wrap(r), _wrap(alpha)
    c = u.shape[-1]
    dt = u.dtype
    b1v = np.zeros(c, dt) if b1 is None else _wrap(b1).value
    b2v = np.zeros(c, dt) if b2 is None else _wrap(b2).value
    if _kink_log is not None:
        _kink_log.append((u.value - r.value + b1v) > 0)
    out, branch, gate = kernels.ic_combine(u.value, r.value, float(alpha.value), b1v, b2v)
    a = dt.type(alpha.value)
    axes = tuple(range(u.ndim - 1))
    parents = [u, r, alpha]
    if b1 is not None:
        parents.append(_wrap(b1))
    if b2 is not None:
        parents.append(_wrap(b2))

    def bw(g):
        gh = g * gate
        gh *= a
        grads = [g + gh, -gh, np.asarray(np.sum(g * branch), dtype=dt).reshape(alpha.shape)]
        if b1 is not None:
            grads.append(gh.sum(axis=axes))
        if b2 is not None:
            grads.append(g.sum(axis=axes))
        return tuple(grads)

    return _make(out, tuple(parents), bw)


def max_pool2d(x, size=2, stride=None):
    x = _wrap(x)
    _as_batch(x)
    stride = stride or size
    n, h, w, c = x.shape
    oh, ow = (h - size) // stride + 1, (w - size) // stride + 1
    xv = x.value
    best = None
    arg = np.zeros((n, oh, ow, c), dtype=np.int64)
    for ki in range(size):
        for kj in range(size):
            win = xv[:, ki:ki + stride * (oh - 1) + 1:stride, kj:kj + stride * (ow - 1) + 1:stride, :]
            if best is None:
                best = win.copy()
                continue
            take = win > best
            best = np.where(take, win, best)
            arg[take] = ki * size + kj

    def bw(g):
        gx = np.zeros_like(xv)
        for ki in range(size):
            for kj in range(size):
                sel = arg == ki * size + kj
                gx[:, ki:ki + stride * (oh - 1) + 1:stride, kj:kj + stride * (ow - 1) + 1:stride, :] += g * sel
        return (gx,)

    return _make(best, (x,), bw)


def global_avg_pool(x):
    x = _wrap(x)
    _as_batch(x)
    hw = x.shape[1] * x.shape[2]
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, None, None, :] / hw, shape).copy(),)

    return _make(x.value.mean(axis=(1, 2)), (x,), bw)


@dataclass
class BatchNormState:
    """Running statistics tracked by a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


def batch_norm(x, gamma, beta, state, training):
    """Normalize over every axis but the last (channels).

    Training mode uses batch statistics and updates ``state`` in place;
    evaluation uses the running statistics.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    axes = tuple(range(x.ndim - 1))
    xv = x.value
    dt = xv.dtype
    if training:
        m = xv.size // xv.shape[-1]
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        mom = dt.type(state.momentum)
        state.mean = ((1 - mom) * state.mean + mom * mu).astype(dt)
        unbiased = var * (m / max(m - 1, 1))
        state.var = ((1 - mom) * state.var + mom * unbiased).astype(dt)
    else:
        mu, var = state.mean.astype(dt), state.var.astype(dt)
    inv_std = 1.0 / np.sqrt(var + dt.type(state.eps))
    xhat = (xv - mu) * inv_std
    out = xhat * gamma.value + beta.value

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.value
        if training:
            gx = inv_std * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
        else:
            gx = gxhat * inv_std
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


def log_softmax(x, axis=-1):
    x = _wrap(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def softmax(x, axis=-1):
    x = _wrap(x)
    z = np.exp(x.value - x.value.max(axis=axis, keepdims=True))
    p = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), bw)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = _wrap(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    return scale(sum(mul(log_softmax(logits), onehot)), -1.0 / n)


def mse(pred, target):
    pred = _wrap(pred)
    d = sub(pred, np.asarray(target, dtype=pred.dtype))
    return mean(mul(d, d))


@dataclass
class GradCheckResult:
    max_error: float
    checked: int
    kink_excluded: int
    kink_max_error: float = 0.0
    per_input: list = field(default_factory=list)

    def passed(self, tol):
        return self.max_error < tol


def _kink_signature(f, arrays):
    global _kink_log
    _kink_log = []
    try:
        with no_grad():
            val = f(*[Variable(a) for a in arrays])
        return [m.copy() for m in _kink_log], float(np.sum(_wrap(val).value))
    finally:
        _kink_log = None


def grad_check(f, inputs, eps=1e-5):
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    Coordinates whose +/-eps perturbation flips the sign pattern of any ReLU-like
    intermediate are reported in ``kink_excluded`` and left out of ``max_error``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    vars_ = [Variable(a.copy(), requires_grad=True) for a in arrays]
    out = f(*vars_)
    if not np.isfinite(out.value).all():
        raise NonFiniteError("function value is not finite")
    out.backward()
    base_sig, _ = _kink_signature(f, arrays)
    result = GradCheckResult(0.0, 0, 0)
    for idx, (a, v) in enumerate(zip(arrays, vars_)):
        analytic = v.grad if v.grad is not None else np.zeros_like(a)
        worst = 0.0
        for pos in np.ndindex(a.shape):
            orig = a[pos]
            a[pos] = orig + eps
            sig_p, fp = _kink_signature(f, arrays)
            a[pos] = orig - eps
            sig_m, fm = _kink_signature(f, arrays)
            a[pos] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("non-finite value during finite differencing")
            numeric = (fp - fm) / (2 * eps)
            an = float(analytic[pos])
            err = abs(an - numeric) / max(1.0, abs(an), abs(numeric))
            kink = any(
                not (np.array_equal(s0, s1) and np.array_equal(s0, s2))
                for s0, s1, s2 in zip(base_sig, sig_p, sig_m)
            )
            if kink:
                result.kink_excluded += 1
                result.kink_max_error = max(result.kink_max_error, err)
                continue
            result.checked += 1
            worst = max(worst, err)
        result.per_input.append(worst)
        result.max_error = max(result.max_error, worst)
    return result
