"""Self-checks run by ``icnet verify``.

Each check returns ``(ok, detail)``. Checks are cheap (well under a minute in
total) and exercise the properties the rest of the package relies on.
"""

import math
import warnings
from fractions import Fraction

import numpy as np

from icnet import autograd as ag
from icnet import ic_neuron as icn
from icnet import kernels
from icnet.ic_conv import cost_report, ic_conv, ic_conv_forward, ic_conv_forward_per_filter, init_ic_conv
from icnet.tensor_core import ConvGeometry, conv2d

CHECKS = {}


def check(name):
    def deco(fn):
        CHECKS[name] = fn
        return fn

    return deco


@check("xor_witness")
def _xor_witness():
    y = icn.xor_witness_outputs()
    expected = np.array([0.2957, 0.0, 0.0, 0.2104])
    err = float(np.max(np.abs(y - expected)))
    margin = min(y[0], y[3]) - max(y[1], y[2])
    return err <= 1e-4 and margin >= 0.2, f"max err {err:.2e}, margin {margin:.4f}"


@check("casewise")
def _casewise():
    rng = np.random.default_rng(0)
    worst = 0.0
    for n in (1, 2, 5, 16):
        for _ in range(25):
            p = icn.ICNeuronParams(rng.normal(size=n), rng.normal(), rng.normal(), rng.normal())
            x = rng.normal(size=(40, n)) * 3
            worst = max(worst, float(np.max(np.abs(icn.ic_forward(x, p) - icn.ic_forward_casewise(x, p)))))
    return worst <= 1e-12, f"max |diff| {worst:.2e}"


@check("rotation")
def _rotation():
    res = icn.rotation_sweep([1.0, 0.0, 0.0])
    ok = res.angle >= math.pi - 1e-3 and res.max_orthogonality_error <= 1e-9
    return ok, f"swept {res.angle:.6f} rad, orthogonality err {res.max_orthogonality_error:.1e}"


@check("mp_embedding")
def _mp_embedding():
    rng = np.random.default_rng(1)
    worst = 0.0
    for n in (1, 3, 8):
        mp = icn.MPNeuronParams(rng.normal(size=n), rng.normal())
        ic = icn.mp_to_ic(mp, 10.0)
        x = rng.uniform(-10, 10, size=(500, n))
        worst = max(worst, float(np.max(np.abs(icn.ic_forward(x, ic) - icn.mp_forward(x, mp)))))
    return worst == 0.0, f"max |diff| {worst:.2e}"


def _op_cases(rng):
    g = ConvGeometry(3, 1, 1, 2, 3)
    gs = ConvGeometry(3, 2, 1, 2, 2)
    return {
        "conv2d": (lambda x, w: ag.sum(ag.mul(ag.conv2d(x, w, g), ag.conv2d(x, w, g))), [rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(3, 3, 2, 3))]),
        "conv2d_s2": (lambda x, w: ag.sum(ag.mul(ag.conv2d(x, w, gs), ag.conv2d(x, w, gs))), [rng.normal(size=(1, 6, 6, 2)), rng.normal(size=(3, 3, 2, 2))]),
        "depthwise_ones": (lambda x: ag.sum(ag.mul(ag.depthwise_ones(x, gs), ag.depthwise_ones(x, gs))), [rng.normal(size=(2, 6, 6, 2))]),
        "pointwise": (lambda s, w: ag.sum(ag.mul(ag.pointwise(s, w), ag.pointwise(s, w))), [rng.normal(size=(2, 4, 4, 3)), rng.normal(size=(3, 4))]),
        "relu": (lambda x: ag.sum(ag.mul(ag.relu(x), x)), [rng.normal(size=(3, 4, 4, 2))]),
        "ic_combine": (
            lambda u, r, a, b1, b2: ag.sum(ag.mul(ag.ic_combine(u, r, a, b1, b2), u)),
            [rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(2, 3, 3, 4)), np.array(0.7), rng.normal(size=4), rng.normal(size=4)],
        ),
        "batch_norm": (
            lambda x, gm, b: ag.sum(ag.mul(ag.batch_norm(x, gm, b, ag.BatchNormState(np.zeros(3), np.ones(3)), True), x)),
            [rng.normal(size=(4, 3, 3, 3)), rng.normal(size=3), rng.normal(size=3)],
        ),
        "max_pool": (lambda x: ag.sum(ag.mul(ag.max_pool2d(x, 2), ag.max_pool2d(x, 2))), [rng.normal(size=(2, 4, 4, 2))]),
        "cross_entropy": (lambda x: ag.cross_entropy(x, [0, 3, 1, 4]), [rng.normal(size=(4, 5))]),
        "matmul": (lambda a, b: ag.sum(ag.mul(ag.matmul(a, b), ag.matmul(a, b))), [rng.normal(size=(3, 5)), rng.normal(size=(5, 2))]),
    }


@check("gradcheck_ops")
def _gradcheck_ops():
    worst, where = 0.0, ""
    for seed in range(3):
        for name, (f, inputs) in _op_cases(np.random.default_rng(seed)).items():
            err = ag.grad_check(f, inputs).max_error
            if err > worst:
                worst, where = err, name
    return worst < 1e-4, f"max rel err {worst:.2e} ({where or 'all ops'})"


@check("gradcheck_ic_layer")
def _gradcheck_ic_layer():
    worst = 0.0
    for seed, stride in ((0, 1), (1, 2), (2, 1)):
        rng = np.random.default_rng(seed)
        geom = ConvGeometry(3, stride, 1, 3, 4)

        def f(x, w, wp, a, b1, b2):
            return ag.sum(ag.mul(ic_conv(x, w, wp, a, geom, b1, b2), ic_conv(x, w, wp, a, geom, b1, b2)))

        inputs = [
            rng.normal(size=(2, 6, 6, 3)),
            rng.normal(size=(3, 3, 3, 4)) * 0.3,
            rng.normal(size=(3, 4)) * 0.3,
            np.array(0.8),
            rng.normal(size=4),
            rng.normal(size=4),
        ]
        worst = max(worst, ag.grad_check(f, inputs).max_error)
    return worst < 1e-4, f"max rel err {worst:.2e}"


@check("alpha_zero")
def _alpha_zero():
    rng = np.random.default_rng(3)
    worst = 0.0
    for k, stride, pad, cin, cout in ((3, 1, 1, 3, 5), (3, 2, 1, 4, 4), (5, 1, 2, 2, 3), (1, 1, 0, 3, 2)):
        geom = ConvGeometry(k, stride, pad, cin, cout)
        w = rng.normal(size=(k, k, cin, cout))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = init_ic_conv(geom, "from_pretrained", pretrained=w, rng=rng)
        x = rng.normal(size=(2, 8, 8, cin))
        worst = max(worst, float(np.max(np.abs(ic_conv_forward(x, p) - conv2d(x, w, geom)))))
    return worst <= 1e-12, f"max |diff| {worst:.2e}"


@check("shared_window_sum")
def _shared_window_sum():
    rng = np.random.default_rng(4)
    geom = ConvGeometry(3, 1, 1, 3, 6)
    p = init_ic_conv(geom, "scratch", rng=rng)
    x = rng.normal(size=(2, 7, 7, 3))
    diff = float(np.max(np.abs(ic_conv_forward(x, p) - ic_conv_forward_per_filter(x, p))))
    return diff <= 1e-12, f"max |diff| {diff:.2e}"


@check("cost_ratios")
def _cost_ratios():
    bad = []
    for k in (1, 3, 5):
        for c in (1, 16, 64, 256):
            for cp in (1, 16, 64, 256):
                r = cost_report(ConvGeometry(k, 1, k // 2, cp, c), 8, 8)
                if r.param_ratio != Fraction(1, k * k) or r.mac_ratio != Fraction(1, c) + Fraction(1, k * k):
                    bad.append((k, c, cp))
    return not bad, "exact on the whole grid" if not bad else f"mismatch at {bad[:3]}"


@check("kd_gradient")
def _kd_gradient():
    from icnet.wld import kd_grad, kd_loss

    rng = np.random.default_rng(5)
    worst = 0.0
    for tau in (1.0, 4.0, 10.0):
        t = rng.normal(size=(6, 10)) * 3
        s = ag.Variable(rng.normal(size=(6, 10)) * 3, requires_grad=True)
        kd_loss(t, s, tau).backward()
        worst = max(worst, float(np.max(np.abs(s.grad - kd_grad(t, s.value, tau)))))
    same = ag.Variable(rng.normal(size=(4, 10)), requires_grad=True)
    kd_loss(same.value, same, 4.0).backward()
    zero = float(np.linalg.norm(same.grad))
    return worst <= 1e-10 and zero <= 1e-10, f"max |diff| {worst:.2e}, identical-logit grad {zero:.1e}"


@check("backends")
def _backends():
    if not kernels.HAVE_COMPILED:
        return True, "compiled extension unavailable; fallback only"
    rng = np.random.default_rng(6)
    geom = ConvGeometry(3, 2, 1, 3, 4)
    p = init_ic_conv(geom, "scratch", rng=rng)
    x = rng.normal(size=(2, 9, 9, 3))
    prev = kernels.BACKEND
    try:
        kernels.use_backend("compiled")
        a = ic_conv_forward(x, p)
        kernels.use_backend("python")
        b = ic_conv_forward(x, p)
    finally:
        kernels.use_backend(prev)
    return np.array_equal(a, b), "bitwise equal" if np.array_equal(a, b) else "backends differ"


@check("xor_fit")
def _xor_fit():
    ic = icn.xor_fit("ic", range(20), steps=5000)
    mp = icn.xor_fit("mp", range(20), steps=5000)
    n_ic, n_mp = int(ic.solved().sum()), int(mp.solved().sum())
    return n_ic >= 16 and n_mp == 0, f"IC solved {n_ic}/20, MP solved {n_mp}/20"


def run(filter_text=None):
    """Run every check whose name contains ``filter_text``; returns ``[(name, ok, detail)]``."""
    out = []
    for name, fn in CHECKS.items():
        if filter_text and filter_text not in name:
            continue
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
