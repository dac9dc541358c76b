"""Dense channel-last tensors and the three convolution primitives.

Tensors are plain numpy arrays laid out row-major and channel-last: a single
feature map is ``(H, W, C)`` and a batch is ``(N, H, W, C)``. Convolution
kernels are ``(k, k, C_in, C_out)`` and pointwise weights ``(C_in, C_out)``.

All window reductions accumulate in a fixed (ki, kj) order, so results are
bitwise reproducible for a given dtype and backend.
"""

from dataclasses import dataclass

import numpy as np

from icnet import kernels

DEFAULT_DTYPE = np.float64
FLOAT_DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def resolve_dtype(dtype):
    if dtype is None:
        return np.dtype(DEFAULT_DTYPE)
    if isinstance(dtype, str) and dtype in FLOAT_DTYPES:
        return np.dtype(FLOAT_DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TypeError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


def as_tensor(data, dtype=None):
    """Copy ``data`` into a contiguous float array and check it is finite."""
    arr = np.ascontiguousarray(data, dtype=resolve_dtype(dtype))
    check_finite(arr)
    return arr


def check_finite(arr, what="tensor"):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")


@dataclass(frozen=True)
class ConvGeometry:
    kernel_size: int
    stride: int = 1
    padding: int = 0
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    def output_hw(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {h}x{w} too small for kernel {k} with padding {p}")
        return oh, ow

    def to_dict(self):
        return {
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
        }


def _batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def pad_hw(x, padding):
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def unpad_hw(xp, padding):
    if padding == 0:
        return xp
    return xp[:, padding:-padding, padding:-padding, :]


def _check_input(x, geom):
    if x.shape[-1] != geom.in_channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, geometry expects {geom.in_channels}")


def conv2d(x, weight, geom):
    """Standard convolution ``u_i = w_i (*) X``; no bias, no activation."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    k = geom.kernel_size
    expected = (k, k, geom.in_channels, geom.out_channels)
    if weight.shape != expected:
        raise ShapeError(f"kernel shape {weight.shape} does not match geometry {expected}")
    xb, squeeze = _batched(x)
    _check_input(xb, geom)
    check_finite(xb, "conv2d input")
    out, _ = conv2d_with_cols(xb, weight, geom)
    return out[0] if squeeze else out


def conv2d_with_cols(xb, weight, geom):
    """Batched convolution; also returns the im2col matrix for reuse in backward."""
    n, h, w, _ = xb.shape
    k, s = geom.kernel_size, geom.stride
    oh, ow = geom.output_hw(h, w)
    xb = xb.astype(weight.dtype, copy=False)
    cols = kernels.im2col(pad_hw(xb, geom.padding), k, s, oh, ow)
    out = cols @ weight.reshape(k * k * geom.in_channels, geom.out_channels)
    return out.reshape(n, oh, ow, geom.out_channels), cols


def depthwise_ones_conv(x, geom):
    """Per-channel k*k window sum of the zero-padded input (all-ones depthwise kernel)."""
    x = np.asarray(x)
    xb, squeeze = _batched(x)
    _check_input(xb, geom)
    check_finite(xb, "depthwise_ones_conv input")
    out = depthwise_ones_raw(xb, geom)
    return out[0] if squeeze else out


def depthwise_ones_raw(xb, geom):
    _, h, w, _ = xb.shape
    oh, ow = geom.output_hw(h, w)
    if geom.kernel_size == 1 and geom.stride == 1 and geom.padding == 0:
        return np.array(xb, copy=True)
    return kernels.box_sum(pad_hw(xb, geom.padding), geom.kernel_size, geom.stride, oh, ow)


def pointwise_recalibrate(s, wp):
    """Channel-wise multiply by each column of ``wp`` and sum over input channels."""
    s = np.asarray(s)
    wp = np.asarray(wp)
    if wp.ndim != 2 or s.shape[-1] != wp.shape[0]:
        raise ShapeError(f"cannot recalibrate {s.shape[-1]} channels with weights {wp.shape}")
    check_finite(s, "pointwise_recalibrate input")
    return pointwise_raw(s, wp)


def pointwise_raw(s, wp):
    flat = s.reshape(-1, s.shape[-1]) @ wp
    return flat.reshape(s.shape[:-1] + (wp.shape[1],))


def relu(x):
    return np.maximum(x, 0)


def ones_kernel(geom, dtype=None):
    """Explicit (k, k, C, C) kernel equivalent to :func:`depthwise_ones_conv`."""
    k, c = geom.kernel_size, geom.in_channels
    ker = np.zeros((k, k, c, c), dtype=resolve_dtype(dtype))
    for ch in range(c):
        ker[:, :, ch, ch] = 1
    return ker
