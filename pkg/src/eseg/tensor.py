"""Dense NCHW tensor operators and their analytic backward passes.

Tensors are plain 4-D ``numpy.ndarray`` objects of dtype float32 or float64.
Every function is pure: inputs are never modified.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DTypeError, ShapeError

FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))

BN_EPS = 1e-3
BN_MOMENTUM = 0.01

ACTIVATIONS = ("relu", "silu", "sigmoid")


def check_tensor(x, name="x"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D array, got shape {getattr(x, 'shape', None)}",
                         shape=list(getattr(x, "shape", ())))
    if x.dtype not in FLOAT_TYPES:
        raise DTypeError(f"{name} has unsupported dtype {x.dtype}", dtype=str(x.dtype))
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}", shape=list(x.shape))


def check_same_dtype(*arrays):
    dtypes = {a.dtype for a in arrays}
    if len(dtypes) > 1:
        raise DTypeError(f"mixed element types {sorted(map(str, dtypes))}",
                         dtypes=sorted(map(str, dtypes)))


def _backend(name):
    return kernels.active if name is None else kernels.get_backend(name)


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _check_conv_args(x, weight, stride, padding, depthwise):
    check_tensor(x)
    check_tensor(weight, "weight")
    check_same_dtype(x, weight)
    k = weight.shape[2]
    if weight.shape[3] != k:
        raise ShapeError(f"only square kernels are supported, weight {weight.shape}",
                         weight_shape=list(weight.shape))
    if depthwise:
        if weight.shape[0] != x.shape[1] or weight.shape[1] != 1:
            raise ShapeError(
                f"depthwise weight {weight.shape} does not match input channels of x {x.shape}",
                x_shape=list(x.shape), weight_shape=list(weight.shape))
    elif weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv weight {weight.shape} expects {weight.shape[1]} input channels, x is {x.shape}",
                         x_shape=list(x.shape), weight_shape=list(weight.shape))
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding not in (0, k // 2):
        raise ShapeError(f"padding must be 0 or {k // 2} for a {k}x{k} kernel, got {padding}")
    oh = conv_out_size(x.shape[2], k, stride, padding)
    ow = conv_out_size(x.shape[3], k, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {k} with stride {stride} does not fit input {x.shape}",
                         x_shape=list(x.shape), weight_shape=list(weight.shape))
    return oh, ow


def conv2d(x, weight, stride=1, padding=0, *, backend=None):
    """Cross-correlation without bias. ``weight`` is (out, in, k, k)."""
    oh, ow = _check_conv_args(x, weight, stride, padding, depthwise=False)
    out = np.zeros((x.shape[0], weight.shape[0], oh, ow), dtype=x.dtype)
    return _backend(backend).conv2d_fwd(np.ascontiguousarray(x), np.ascontiguousarray(weight),
                                        stride, padding, out)


def conv2d_backward(dy, x, weight, stride=1, padding=0, *, backend=None):
    """Return ``(dx, dweight)``."""
    be = _backend(backend)
    dy = np.ascontiguousarray(dy)
    dx = be.conv2d_bwd_input(dy, np.ascontiguousarray(weight), stride, padding, np.zeros_like(x))
    dw = be.conv2d_bwd_weight(dy, np.ascontiguousarray(x), stride, padding, np.zeros_like(weight))
    return dx, dw


def depthwise_conv2d(x, weight, stride=1, padding=0, *, backend=None):
    """Per-channel cross-correlation. ``weight`` is (c, 1, k, k)."""
    oh, ow = _check_conv_args(x, weight, stride, padding, depthwise=True)
    out = np.zeros((x.shape[0], x.shape[1], oh, ow), dtype=x.dtype)
    return _backend(backend).dwconv2d_fwd(np.ascontiguousarray(x), np.ascontiguousarray(weight),
                                          stride, padding, out)


def depthwise_conv2d_backward(dy, x, weight, stride=1, padding=0, *, backend=None):
    be = _backend(backend)
    dy = np.ascontiguousarray(dy)
    dx = be.dwconv2d_bwd_input(dy, np.ascontiguousarray(weight), stride, padding, np.zeros_like(x))
    dw = be.dwconv2d_bwd_weight(dy, np.ascontiguousarray(x), stride, padding, np.zeros_like(weight))
    return dx, dw


def pool2d(x, kind="avg", k=3, stride=2, padding=1, *, backend=None, return_index=False):
    """Average or max pooling.

    Average pooling divides by the number of in-bounds taps, so padding never
    dilutes border windows. With ``return_index`` max pooling also returns
    the flat (row * width + col) argmax per window, needed by the backward.
    """
    check_tensor(x)
    if k < 1 or stride < 1 or padding < 0 or padding >= k:
        raise ShapeError(f"invalid pooling window k={k} stride={stride} padding={padding}")
    oh = conv_out_size(x.shape[2], k, stride, padding)
    ow = conv_out_size(x.shape[3], k, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool window {k} does not fit input {x.shape}", x_shape=list(x.shape))
    be = _backend(backend)
    out = np.zeros((x.shape[0], x.shape[1], oh, ow), dtype=x.dtype)
    x = np.ascontiguousarray(x)
    if kind == "avg":
        be.avgpool_fwd(x, k, stride, padding, out)
        return (out, None) if return_index else out
    if kind == "max":
        idx = np.zeros(out.shape, dtype=np.int64)
        be.maxpool_fwd(x, k, stride, padding, out, idx)
        return (out, idx) if return_index else out
    raise ValueError(f"unknown pool kind {kind!r}")


def pool2d_backward(dy, x_shape, kind, k, stride, padding, index=None, *, backend=None):
    be = _backend(backend)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dy = np.ascontiguousarray(dy)
    if kind == "avg":
        return be.avgpool_bwd(dy, k, stride, padding, dx)
    if index is None:
        raise ValueError("max pool backward needs the forward argmax index")
    return be.maxpool_bwd(dy, index, dx)


def _bilinear_axis(in_size, out_size, dtype):
    # half-pixel centres, clamped to the border
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    return i0, i1, (src - i0).astype(dtype)


def bilinear_resize(x, out_h, out_w, *, backend=None):
    check_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == x.shape[2:]:
        return x.copy()
    y0, y1, fy = _bilinear_axis(x.shape[2], out_h, x.dtype)
    x0, x1, fx = _bilinear_axis(x.shape[3], out_w, x.dtype)
    out = np.empty((x.shape[0], x.shape[1], out_h, out_w), dtype=x.dtype)
    return _backend(backend).bilinear_fwd(np.ascontiguousarray(x), y0, y1, fy, x0, x1, fx, out)


def bilinear_resize_backward(dy, in_h, in_w, *, backend=None):
    n, c, out_h, out_w = dy.shape
    if (out_h, out_w) == (in_h, in_w):
        return dy.copy()
    y0, y1, fy = _bilinear_axis(in_h, out_h, dy.dtype)
    x0, x1, fx = _bilinear_axis(in_w, out_w, dy.dtype)
    dx = np.zeros((n, c, in_h, in_w), dtype=dy.dtype)
    return _backend(backend).bilinear_bwd(np.ascontiguousarray(dy), y0, y1, fy, x0, x1, fx, dx)


def batch_norm(x, gamma, beta, running_mean, running_var, mode="infer", eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel normalisation.

    Returns ``(y, new_running_mean, new_running_var, cache)``. In ``train``
    mode the batch statistics (biased variance) are used and blended into
    the running statistics as ``(1 - momentum) * running + momentum * batch``;
    in ``infer`` mode the running statistics are used and returned unchanged.
    """
    check_tensor(x)
    c = x.shape[1]
    for name, v in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if v.shape != (c,):
            raise ShapeError(f"{name} has shape {v.shape}, expected ({c},) for x {x.shape}",
                             x_shape=list(x.shape), param_shape=list(v.shape))
    check_same_dtype(x, gamma, beta)
    if x.shape[0] * x.shape[2] * x.shape[3] == 0:
        raise ShapeError("batch_norm over a channel with zero elements", x_shape=list(x.shape))
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_mean = ((1 - momentum) * running_mean + momentum * mean).astype(running_mean.dtype)
        new_var = ((1 - momentum) * running_var + momentum * var).astype(running_var.dtype)
    elif mode == "infer":
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv_std, gamma, mode)
    return y.astype(x.dtype, copy=False), new_mean, new_var, cache


def batch_norm_backward(dy, cache):
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, mode = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    g = (gamma * inv_std)[None, :, None, None]
    if mode == "infer":
        return dy * g, dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = g * (dy - dbeta[None, :, None, None] / m - xhat * dgamma[None, :, None, None] / m)
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(x, kind):
    if kind == "relu":
        return np.maximum(x, 0).astype(x.dtype, copy=False)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "silu":
        return x * _sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activate_backward(dy, x, kind):
    if kind == "relu":
        return dy * (x > 0)
    s = _sigmoid(x)
    if kind == "sigmoid":
        return dy * s * (1 - s)
    if kind == "silu":
        return dy * (s * (1 + x * (1 - s)))
    raise ValueError(f"unknown activation {kind!r}")


def softmax_vec(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise ShapeError(f"softmax_vec expects a non-empty vector, got shape {w.shape}")
    e = np.exp(w - w.max())
    return e / e.sum()


def softmax_vec_backward(dy, s):
    """Vector-Jacobian product of softmax given its output ``s``."""
    return s * (dy - np.dot(dy, s))
