"""The dense IC neuron, its two-regime form, and the constructions behind it.

An IC neuron computes ``f(w.x + relu(w.x - w' * sum(x) + b1) + b2)``. With the
intrinsic weight ``w' = 1`` it is the original collision neuron; the switch
``w.x - w' * sum(x) + b1 = 0`` is the hyperplane that splits input space into
two linear regimes.
"""

from dataclasses import dataclass

import numpy as np


class DegenerateError(ValueError):
    """Raised when ``w`` is parallel to the all-ones vector."""


def relu(z):
    return np.maximum(z, 0)


def identity(z):
    return z


@dataclass
class ICNeuronParams:
    w: np.ndarray
    w_prime: float = 1.0
    b1: float = 0.0
    b2: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if self.w.size < 1:
            raise ValueError("an IC neuron needs at least one input")
        vals = np.concatenate([self.w, [self.w_prime, self.b1, self.b2]])
        if not np.isfinite(vals).all():
            raise ValueError("IC neuron parameters must be finite")

    @property
    def n(self):
        return self.w.size


@dataclass
class MPNeuronParams:
    w: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if self.w.size < 1:
            raise ValueError("an MP neuron needs at least one input")
        if not np.isfinite(np.append(self.w, self.b)).all():
            raise ValueError("MP neuron parameters must be finite")

    @property
    def n(self):
        return self.w.size


def _inputs(x, n):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != n:
        raise ValueError(f"input has dimension {x.shape[-1]}, neuron expects {n}")
    return x


def mp_forward(x, p, f=relu):
    x = _inputs(x, p.n)
    return f(x @ p.w + p.b)


def ic_forward(x, p, f=relu):
    """Evaluate the IC neuron on one input ``(n,)`` or a batch ``(m, n)``."""
    x = _inputs(x, p.n)
    lin = x @ p.w
    return f(lin + relu(lin - p.w_prime * x.sum(axis=-1) + p.b1) + p.b2)


def ic_forward_casewise(x, p, f=relu):
    """Same neuron evaluated through its explicit two-regime form."""
    x = _inputs(x, p.n)
    lin = x @ p.w
    xsum = x.sum(axis=-1)
    h = lin - p.w_prime * xsum + p.b1
    active = f(2 * lin - p.w_prime * xsum + p.b1 + p.b2)
    inactive = f(lin + p.b2)
    return np.where(h >= 0, active, inactive)


def ic_preactivation(x, p):
    """The value fed to the outer activation; continuous and piecewise linear in x."""
    return ic_forward(x, p, identity)


def hyperplane_normal(p):
    """Normal ``w - w' * 1`` of the dividing hyperplane ``sum((w_i - w') x_i) = 0``."""
    return p.w - p.w_prime


def _check_independent(w):
    w = np.asarray(w, dtype=np.float64)
    ones = np.ones_like(w)
    resid = w - ones * (w @ ones) / (ones @ ones)
    if np.linalg.norm(resid) <= 1e-12 * max(1.0, np.linalg.norm(w)):
        raise DegenerateError("w is parallel to the all-ones vector; the hyperplane cannot rotate")
    return w


@dataclass
class SweepResult:
    angle: float
    angles: np.ndarray
    w_primes: np.ndarray
    max_orthogonality_error: float


def default_w_prime_grid(limit=1e4, per_decade=20):
    decades = int(round(np.log10(limit))) + 4
    pos = np.logspace(-4, np.log10(limit), decades * per_decade + 1)
    return np.concatenate([-pos[::-1], [0.0], pos])


def rotation_sweep(w, w_primes=None):
    """Rotate the hyperplane normal by varying ``w'`` and measure the swept angle.

    The normal ``w - w' * 1`` always lies in ``span{w, 1}``; it is expressed in
    an orthonormal basis of that plane and the angle range over the (sorted)
    grid is returned, along with the worst deviation from orthogonality to
    ``cross(w, 1)`` (three-dimensional ``w`` only).
    """
    w = _check_independent(w)
    if w_primes is None:
        w_primes = default_w_prime_grid()
    w_primes = np.sort(np.asarray(w_primes, dtype=np.float64))
    ones = np.ones_like(w)
    e1 = ones / np.linalg.norm(ones)
    v = w - (w @ e1) * e1
    e2 = v / np.linalg.norm(v)
    normals = w[None, :] - w_primes[:, None] * ones[None, :]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    angles = np.unwrap(np.arctan2(normals @ e2, normals @ e1))
    orth = 0.0
    if w.size == 3:
        axis = np.cross(w, ones)
        axis /= np.linalg.norm(axis)
        orth = float(np.abs(normals @ axis).max())
    return SweepResult(float(angles.max() - angles.min()), angles, w_primes, orth)


def mp_to_ic(mp, bound):
    """IC neuron that reproduces ``mp`` exactly on the box ``|x|_inf <= bound``.

    With ``w' = 0`` and ``b1 = -bound * sum|w_i| - 1`` the inner argument is at
    most -1 on the box, so the inner ReLU is always off.
    """
    if not bound > 0:
        raise ValueError("domain bound must be positive")
    b1 = -bound * float(np.abs(mp.w).sum()) - 1.0
    return ICNeuronParams(mp.w.copy(), w_prime=0.0, b1=b1, b2=float(mp.b))


# XOR witness: equal weights, intrinsic weight 1, 0.6463 inside the inner ReLU.
XOR_WITNESS_WEIGHT = 0.2805
XOR_WITNESS_INNER_BIAS = 0.6463
XOR_WITNESS_OUTER_BIAS = -0.3506
XOR_POINTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
XOR_TARGETS = np.array([0.25, 0.0, 0.0, 0.25])


def xor_witness_params(placement="literal"):
    """Witness parameters; ``placement="swapped"`` exchanges the two biases."""
    inner, outer = XOR_WITNESS_INNER_BIAS, XOR_WITNESS_OUTER_BIAS
    if placement == "swapped":
        inner, outer = outer, inner
    elif placement != "literal":
        raise ValueError(f"unknown bias placement {placement!r}")
    return ICNeuronParams(np.full(2, XOR_WITNESS_WEIGHT), w_prime=1.0, b1=inner, b2=outer)


def xor_witness_outputs(placement="literal"):
    return ic_forward(XOR_POINTS, xor_witness_params(placement))


def _xor_init(kind, seeds):
    """Small weights around the w'=1 neuron, biases on the active side of both ReLUs."""
    w = np.empty((len(seeds), 2))
    wp = np.empty(len(seeds))
    for i, s in enumerate(seeds):
        r = np.random.default_rng(s)
        w[i] = r.normal(0.0, 0.1, 2)
        wp[i] = 1.0 + r.normal(0.0, 0.1)
    b1 = np.full(len(seeds), 0.1)
    b2 = np.full(len(seeds), 0.25)
    if kind == "mp":
        return {"w": w, "b": b2}
    return {"w": w, "wp": wp, "b1": b1, "b2": b2}


def xor_loss_and_grads(kind, params, x=XOR_POINTS, t=XOR_TARGETS):
    """MSE of a batch of independent neurons (one per row of ``params['w']``) and its gradient."""
    w = params["w"]
    a = w @ x.T
    m = x.shape[0]
    if kind == "mp":
        z = a + params["b"][:, None]
        y = relu(z)
        e = y - t
        gz = (2.0 / m) * e * (z > 0)
        return (e**2).mean(axis=1), {"w": gz @ x, "b": gz.sum(axis=1)}
    if kind != "ic":
        raise ValueError(f"unknown neuron kind {kind!r}")
    s = x.sum(axis=1)
    h = a - params["wp"][:, None] * s + params["b1"][:, None]
    z = a + relu(h) + params["b2"][:, None]
    y = relu(z)
    e = y - t
    gz = (2.0 / m) * e * (z > 0)
    gh = gz * (h > 0)
    grads = {
        "w": (gz + gh) @ x,
        "wp": -(gh * s).sum(axis=1),
        "b1": gh.sum(axis=1),
        "b2": gz.sum(axis=1),
    }
    return (e**2).mean(axis=1), grads


@dataclass
class XorFit:
    kind: str
    seeds: list
    mse: np.ndarray
    params: dict

    def solved(self, threshold=1e-3):
        return self.mse <= threshold


def xor_fit(kind, seeds=range(20), steps=5000, lr=0.1):
    """Full-batch gradient descent of one neuron (outer ReLU) on the four XOR points.

    Seeds are trained side by side; each row is an independent neuron.
    """
    seeds = list(seeds)
    params = _xor_init(kind, seeds)
    for _ in range(steps):
        _, grads = xor_loss_and_grads(kind, params)
        for key in params:
            params[key] = params[key] - lr * grads[key]
    mse, _ = xor_loss_and_grads(kind, params)
    return XorFit(kind, seeds, mse, params)
