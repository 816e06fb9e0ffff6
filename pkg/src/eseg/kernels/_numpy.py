"""Pure-numpy kernels with the same signatures as ``_numba``.

Convolutions loop over taps and vectorise over output pixels, so the
per-element accumulation order is the same as the loop kernels.
"""

import numpy as np


def _pad(x, pad, value=0.0):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _window(xp, ky, kx, stride, oh, ow):
    return xp[:, :, ky:ky + stride * (oh - 1) + 1:stride, kx:kx + stride * (ow - 1) + 1:stride]


def conv2d_fwd(x, w, stride, pad, out):
    oc, ic, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    xp = _pad(x, pad)
    for i in range(ic):
        for ky in range(kh):
            for kx in range(kw):
                xs = _window(xp, ky, kx, stride, oh, ow)[:, i]
                out += w[None, :, i, ky, kx, None, None] * xs[:, None]
    return out


def conv2d_bwd_input(dy, w, stride, pad, dx):
    oc, ic, kh, kw = w.shape
    oh, ow = dy.shape[2], dy.shape[3]
    h, wd = dx.shape[2], dx.shape[3]
    dxp = np.zeros((dx.shape[0], ic, h + 2 * pad, wd + 2 * pad), dtype=dx.dtype)
    for ky in range(kh):
        for kx in range(kw):
            # (n, oc, oh, ow) x (oc, ic) -> (n, ic, oh, ow)
            contrib = np.tensordot(dy, w[:, :, ky, kx], axes=([1], [0])).transpose(0, 3, 1, 2)
            _window(dxp, ky, kx, stride, oh, ow)[...] += contrib
    dx += dxp[:, :, pad:pad + h, pad:pad + wd]
    return dx


def conv2d_bwd_weight(dy, x, stride, pad, dw):
    oc, ic, kh, kw = dw.shape
    oh, ow = dy.shape[2], dy.shape[3]
    xp = _pad(x, pad)
    for ky in range(kh):
        for kx in range(kw):
            xs = _window(xp, ky, kx, stride, oh, ow)
            dw[:, :, ky, kx] = np.tensordot(dy, xs, axes=([0, 2, 3], [0, 2, 3]))
    return dw


def dwconv2d_fwd(x, w, stride, pad, out):
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = out.shape[2], out.shape[3]
    xp = _pad(x, pad)
    for ky in range(kh):
        for kx in range(kw):
            out += w[None, :, 0, ky, kx, None, None] * _window(xp, ky, kx, stride, oh, ow)
    return out


def dwconv2d_bwd_input(dy, w, stride, pad, dx):
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = dy.shape[2], dy.shape[3]
    h, wd = dx.shape[2], dx.shape[3]
    dxp = np.zeros((dx.shape[0], dx.shape[1], h + 2 * pad, wd + 2 * pad), dtype=dx.dtype)
    for ky in range(kh):
        for kx in range(kw):
            _window(dxp, ky, kx, stride, oh, ow)[...] += w[None, :, 0, ky, kx, None, None] * dy
    dx += dxp[:, :, pad:pad + h, pad:pad + wd]
    return dx


def dwconv2d_bwd_weight(dy, x, stride, pad, dw):
    kh, kw = dw.shape[2], dw.shape[3]
    oh, ow = dy.shape[2], dy.shape[3]
    xp = _pad(x, pad)
    for ky in range(kh):
        for kx in range(kw):
            dw[:, 0, ky, kx] = np.einsum("nchw,nchw->c", dy, _window(xp, ky, kx, stride, oh, ow))
    return dw


def _pool_counts(h, wd, k, stride, pad, oh, ow):
    ys = np.arange(oh) * stride - pad
    xs = np.arange(ow) * stride - pad
    cy = np.minimum(ys + k, h) - np.maximum(ys, 0)
    cx = np.minimum(xs + k, wd) - np.maximum(xs, 0)
    return cy[:, None] * cx[None, :]


def avgpool_fwd(x, k, stride, pad, out):
    h, wd = x.shape[2], x.shape[3]
    oh, ow = out.shape[2], out.shape[3]
    xp = _pad(x, pad)
    acc = np.zeros_like(out)
    for ky in range(k):
        for kx in range(k):
            acc += _window(xp, ky, kx, stride, oh, ow)
    out[...] = acc / _pool_counts(h, wd, k, stride, pad, oh, ow)
    return out


def avgpool_bwd(dy, k, stride, pad, dx):
    h, wd = dx.shape[2], dx.shape[3]
    oh, ow = dy.shape[2], dy.shape[3]
    g = dy / _pool_counts(h, wd, k, stride, pad, oh, ow)
    dxp = np.zeros((dx.shape[0], dx.shape[1], h + 2 * pad, wd + 2 * pad), dtype=dx.dtype)
    for ky in range(k):
        for kx in range(k):
            _window(dxp, ky, kx, stride, oh, ow)[...] += g
    dx += dxp[:, :, pad:pad + h, pad:pad + wd]
    return dx


def maxpool_fwd(x, k, stride, pad, out, idx):
    h, wd = x.shape[2], x.shape[3]
    oh, ow = out.shape[2], out.shape[3]
    xp = _pad(x, pad, -np.inf)
    best = np.full(out.shape, -np.inf, dtype=out.dtype)
    arg = np.full(out.shape, -1, dtype=idx.dtype)
    base_y = np.arange(oh) * stride - pad
    base_x = np.arange(ow) * stride - pad
    for ky in range(k):
        for kx in range(k):
            iy = base_y + ky
            ix = base_x + kx
            inside = ((iy >= 0) & (iy < h))[:, None] & ((ix >= 0) & (ix < wd))[None, :]
            v = _window(xp, ky, kx, stride, oh, ow)
            take = inside & ((arg < 0) | (v > best))
            best = np.where(take, v, best)
            arg = np.where(take, (iy[:, None] * wd + ix[None, :]), arg)
    out[...] = best
    idx[...] = arg
    return out


def maxpool_bwd(dy, idx, dx):
    n, c, h, wd = dx.shape
    flat = dx.reshape(n * c, h * wd)
    rows = np.repeat(np.arange(n * c), dy.shape[2] * dy.shape[3])
    np.add.at(flat, (rows, idx.reshape(-1)), dy.reshape(-1))
    dx[...] = flat.reshape(dx.shape)
    return dx


def bilinear_fwd(x, y0, y1, fy, x0, x1, fx, out):
    ty = fy[:, None]
    tx = fx[None, :]
    a = x[:, :, y0[:, None], x0[None, :]]
    top = a + tx * (x[:, :, y0[:, None], x1[None, :]] - a)
    a = x[:, :, y1[:, None], x0[None, :]]
    bot = a + tx * (x[:, :, y1[:, None], x1[None, :]] - a)
    out[...] = top + ty * (bot - top)
    return out


def bilinear_bwd(dy, y0, y1, fy, x0, x1, fx, dx):
    n, c, h, wd = dx.shape
    ty = fy[:, None]
    tx = fx[None, :]
    flat = dx.reshape(n, c, h * wd)
    for yy, xx, wgt in (
        (y0, x0, (1.0 - ty) * (1.0 - tx)),
        (y0, x1, (1.0 - ty) * tx),
        (y1, x0, ty * (1.0 - tx)),
        (y1, x1, ty * tx),
    ):
        target = (yy[:, None] * wd + xx[None, :]).reshape(-1)
        contrib = (dy * wgt).reshape(n, c, -1)
        for b in range(n):
            for ch in range(c):
                flat[b, ch] += np.bincount(target, weights=contrib[b, ch], minlength=h * wd).astype(dx.dtype)
    dx[...] = flat.reshape(dx.shape)
    return dx
