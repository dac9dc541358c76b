"""IC convolution layer and its parameter/MAC accounting.

Output channel ``i`` of an IC layer is::

    U_i + alpha * relu(U_i - R_i + b1_i) + b2_i

where ``U = conv2d(X, W)``, ``S`` is the all-ones depthwise window sum of ``X``
(computed once per layer and shared by every filter) and ``R = S @ Wp``
recalibrates those sums with one column of ``Wp`` per output filter. Both
convolutions use the same stride and padding.
"""

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from icnet import autograd as ag
from icnet import kernels
from icnet.tensor_core import (
    ConvGeometry,
    ShapeError,
    check_finite,
    conv2d_with_cols,
    depthwise_ones_raw,
    pointwise_raw,
    resolve_dtype,
)


class PointwiseICWarning(UserWarning):
    """A 1x1 IC layer: the window sum equals the input, so no new spatial information."""


@dataclass
class ICConvParams:
    W: np.ndarray
    Wp: np.ndarray
    alpha: float
    geom: ConvGeometry
    b1: np.ndarray = None
    b2: np.ndarray = None
    alpha_trainable: bool = False

    def __post_init__(self):
        g = self.geom
        k = g.kernel_size
        if self.W.shape != (k, k, g.in_channels, g.out_channels):
            raise ShapeError(f"W shape {self.W.shape} does not match geometry")
        if self.Wp.shape != (g.in_channels, g.out_channels):
            raise ShapeError(f"Wp shape {self.Wp.shape} must be ({g.in_channels}, {g.out_channels})")
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        for b in (self.b1, self.b2):
            if b is not None and b.shape != (g.out_channels,):
                raise ShapeError(f"bias shape {b.shape} must be ({g.out_channels},)")


def ic_conv_forward(x, p):
    """Forward pass on ``(H, W, C')`` or ``(N, H, W, C')`` input (no gradient tracking)."""
    x = np.asarray(x)
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    if xb.ndim != 4 or xb.shape[-1] != p.geom.in_channels:
        raise ShapeError(f"input shape {x.shape} does not match geometry {p.geom}")
    check_finite(xb, "IC conv input")
    xb = xb.astype(p.W.dtype, copy=False)
    u, _ = conv2d_with_cols(xb, p.W, p.geom)
    s = depthwise_ones_raw(xb, p.geom)
    r = pointwise_raw(s, p.Wp)
    c = p.geom.out_channels
    zeros = np.zeros(c, dtype=u.dtype)
    b1 = zeros if p.b1 is None else p.b1.astype(u.dtype)
    b2 = zeros if p.b2 is None else p.b2.astype(u.dtype)
    out, _, _ = kernels.ic_combine(u, r, p.alpha, b1, b2)
    return out[0] if squeeze else out


def ic_conv_forward_per_filter(x, p):
    """Reference path that recomputes the window sum for every output filter."""
    xb = np.asarray(x)[None] if np.asarray(x).ndim == 3 else np.asarray(x)
    u, _ = conv2d_with_cols(xb, p.W, p.geom)
    out = np.empty_like(u)
    for i in range(p.geom.out_channels):
        s = depthwise_ones_raw(xb, p.geom)
        r_i = s @ p.Wp[:, i]
        h = u[..., i] - r_i + (0 if p.b1 is None else p.b1[i])
        out[..., i] = u[..., i] + p.alpha * np.maximum(h, 0) + (0 if p.b2 is None else p.b2[i])
    return out[0] if np.asarray(x).ndim == 3 else out


def ic_conv(x, w, wp, alpha, geom, b1=None, b2=None):
    """Differentiable IC convolution over Variables; ``x`` is a batch."""
    u = ag.conv2d(x, w, geom)
    s = ag.depthwise_ones(x, geom)
    r = ag.pointwise(s, wp)
    return ag.ic_combine(u, r, alpha, b1, b2)


def _fan_in_scale(geom):
    return 1.0 / math.sqrt(geom.kernel_size**2 * geom.in_channels)


def init_ic_conv(geom, mode="scratch", pretrained=None, alpha_mode="trainable", rng=None, biases=False, dtype=None):
    """Create IC layer parameters.

    ``scratch``: He-normal ``W``, ``alpha = 1`` held fixed. ``from_pretrained``:
    ``W`` copied from ``pretrained`` and ``alpha = 0`` so the layer starts out
    identical to the plain convolution; ``alpha_mode`` decides whether alpha is
    learned or driven by a schedule. ``Wp`` is uniform on +/- 1/sqrt(k*k*C') in
    both modes.
    """
    rng = np.random.default_rng(rng)
    dt = resolve_dtype(dtype if pretrained is None or dtype is not None else pretrained.dtype)
    k, cin, cout = geom.kernel_size, geom.in_channels, geom.out_channels
    if k == 1:
        warnings.warn("1x1 IC layer adds capacity but no spatial information", PointwiseICWarning, stacklevel=2)
    if mode == "scratch":
        w = rng.normal(0.0, math.sqrt(2.0) * _fan_in_scale(geom), (k, k, cin, cout))
        alpha, trainable = 1.0, False
    elif mode == "from_pretrained":
        if pretrained is None:
            raise ValueError("from_pretrained needs the pretrained kernel")
        w = np.array(pretrained, copy=True)
        if w.shape != (k, k, cin, cout):
            raise ShapeError(f"pretrained kernel shape {w.shape} does not match geometry")
        if alpha_mode not in ("trainable", "manual"):
            raise ValueError(f"unknown alpha mode {alpha_mode!r}")
        alpha, trainable = 0.0, alpha_mode == "trainable"
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    s = _fan_in_scale(geom)
    wp = rng.uniform(-s, s, (cin, cout))
    b1 = np.zeros(cout, dt) if biases else None
    b2 = np.zeros(cout, dt) if biases else None
    return ICConvParams(w.astype(dt), wp.astype(dt), alpha, geom, b1, b2, trainable)


@dataclass
class CostReport:
    """Kernel parameters and multiply-accumulates of one layer.

    Only multiply-accumulates are counted; elementwise adds, the ReLU and the
    alpha scaling are excluded, and biases are not counted as parameters.
    Under that convention the overhead ratios are exact rationals.
    """

    base_params: int
    extra_params: int
    base_macs: int
    extra_macs: int
    notes: list = field(default_factory=list)

    @property
    def param_ratio(self):
        return Fraction(self.extra_params, self.base_params) if self.base_params else Fraction(0)

    @property
    def mac_ratio(self):
        return Fraction(self.extra_macs, self.base_macs) if self.base_macs else Fraction(0)

    def __add__(self, other):
        return CostReport(
            self.base_params + other.base_params,
            self.extra_params + other.extra_params,
            self.base_macs + other.base_macs,
            self.extra_macs + other.extra_macs,
            self.notes + other.notes,
        )

    def to_dict(self):
        return {
            "base_params": self.base_params,
            "extra_params": self.extra_params,
            "base_macs": self.base_macs,
            "extra_macs": self.extra_macs,
            "param_ratio": str(self.param_ratio),
            "mac_ratio": str(self.mac_ratio),
            "param_ratio_float": float(self.param_ratio),
            "mac_ratio_float": float(self.mac_ratio),
            "notes": list(self.notes),
        }


def cost_report(geom, out_h, out_w, ic=True):
    """Cost of a conv layer with output ``out_h x out_w``; ``ic=False`` gives zero overhead."""
    k, cin, cout = geom.kernel_size, geom.in_channels, geom.out_channels
    sites = out_h * out_w
    base_params = k * k * cin * cout
    base_macs = sites * k * k * cin * cout
    if not ic:
        return CostReport(base_params, 0, base_macs, 0)
    notes = []
    if k == 1:
        notes.append("1x1 IC layer: overhead params equal the base layer's")
    return CostReport(base_params, cin * cout, base_macs, sites * k * k * cin + sites * cin * cout, notes)
