"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--json]

Each kernel runs on the shapes of the largest tiny-resnet layer (batch 128,
32x32, 16 channels). The last rows time a whole IC layer forward and backward.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from icnet import autograd as ag
from icnet import kernels
from icnet.ic_conv import ic_conv, init_ic_conv
from icnet.tensor_core import ConvGeometry


def cases(batch, hw, c):
    rng = np.random.default_rng(0)
    k, stride = 3, 1
    xp = rng.normal(size=(batch, hw + 2, hw + 2, c))
    cols = rng.normal(size=(batch * hw * hw, k * k * c))
    g = rng.normal(size=(batch, hw, hw, c))
    u, r = rng.normal(size=(2, batch, hw, hw, c))
    b = np.zeros(c)
    geom = ConvGeometry(k, stride, 1, c, c)
    params = init_ic_conv(geom, "scratch", rng=rng)
    x = rng.normal(size=(batch, hw, hw, c))

    def ic_layer():
        xv = ag.Variable(x, requires_grad=True)
        w = ag.Variable(params.W, requires_grad=True)
        wp = ag.Variable(params.Wp, requires_grad=True)
        ag.sum(ic_conv(xv, w, wp, 0.5, geom)).backward()

    return {
        "im2col": lambda: kernels.im2col(xp, k, stride, hw, hw),
        "col2im": lambda: kernels.col2im(cols, xp.shape, k, stride, hw, hw),
        "box_sum": lambda: kernels.box_sum(xp, k, stride, hw, hw),
        "box_sum_adjoint": lambda: kernels.box_sum_adjoint(g, xp.shape, k, stride),
        "ic_combine": lambda: kernels.ic_combine(u, r, 0.5, b, b),
        "ic_layer_fwd_bwd": ic_layer,
    }


def bench(repeat, batch, hw, c):
    backends = ["python"] + (["compiled"] if kernels.HAVE_COMPILED else [])
    rows = {}
    prev = kernels.BACKEND
    try:
        for be in backends:
            kernels.use_backend(be)
            for name, fn in cases(batch, hw, c).items():
                fn()
                rows.setdefault(name, {})[be] = min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3
    finally:
        kernels.use_backend(prev)
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--hw", type=int, default=32)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--json", action="store_true")
    args = p.parse_args(argv)
    rows = bench(args.repeat, args.batch, args.hw, args.channels)
    if args.json:
        print(json.dumps(rows, indent=2, sort_keys=True))
        return 0
    if not kernels.HAVE_COMPILED:
        print("compiled extension not built; showing the fallback only", file=sys.stderr)
    print(f"{'kernel':18s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, t in rows.items():
        comp = t.get("compiled")
        speed = f"{t['python'] / comp:7.1f}x" if comp else "      -"
        print(f"{name:18s} {t['python']:10.2f} {comp if comp else float('nan'):12.2f} {speed}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
