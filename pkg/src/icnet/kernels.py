"""Backend selection for the hot kernels.

The compiled extension ``icnet._kernels`` is used when it imports cleanly;
otherwise the numpy fallback is used. Set ``ICNET_PURE_PYTHON=1`` to force the
fallback. Both backends produce bitwise-identical results.
"""

import os

from icnet import _fallback

try:
    from icnet import _kernels as _compiled
    HAVE_COMPILED = True
except ImportError:  # extension not built
    _compiled = None
    HAVE_COMPILED = False

if HAVE_COMPILED and os.environ.get("ICNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    BACKEND, _impl = "compiled", _compiled
else:
    BACKEND, _impl = "python", _fallback

im2col = _impl.im2col
col2im = _impl.col2im
box_sum = _impl.box_sum
box_sum_adjoint = _impl.box_sum_adjoint
ic_combine = _impl.ic_combine


def use_backend(name):
    """Switch backends at runtime (``"compiled"`` or ``"python"``); used by benchmarks."""
    global im2col, col2im, box_sum, box_sum_adjoint, ic_combine, BACKEND, _impl
    if name == "compiled":
        if not HAVE_COMPILED:
            raise ImportError("compiled kernels are not built")
        impl = _compiled
    elif name == "python":
        impl = _fallback
    else:
        raise ValueError(f"unknown backend {name!r}")
    _impl = impl
    BACKEND = name
    im2col = impl.im2col
    col2im = impl.col2im
    box_sum = impl.box_sum
    box_sum_adjoint = impl.box_sum_adjoint
    ic_combine = impl.ic_combine
