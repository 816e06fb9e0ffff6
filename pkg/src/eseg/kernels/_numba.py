"""numba loop kernels.

Every forward output element is reduced in row-major tap order (input
channel, then kernel row, then kernel column), matching ``_numpy`` and the
naive oracles in the test-suite bit for bit. Weight gradients are plain
reductions and are allowed to reassociate.
"""

import numpy as np
from numba import njit, uint64

from .._accel import JIT_OPTIONS


@njit(**JIT_OPTIONS)
def _valid_range(k_off, stride, pad, in_size, out_size):
    # outputs o with 0 <= o*stride - pad + k_off < in_size
    lo = 0
    num = pad - k_off
    if num > 0:
        lo = (num + stride - 1) // stride
    hi = (in_size - 1 + pad - k_off) // stride + 1
    if in_size - 1 + pad - k_off < 0:
        hi = 0
    if hi > out_size:
        hi = out_size
    return lo, hi


# Row helpers work on flattened arrays with unsigned offsets: unsigned
# indices skip numba's negative-index wraparound, which lets LLVM vectorise
# the contiguous (stride 1) case.

@njit(**JIT_OPTIONS)
def _row_axpy(dst, pd, src, ps, st, wv, cnt):
    # dst[pd + j] += wv * src[ps + j * st]
    if st == 1:
        for j in range(cnt):
            dst[pd + j] += wv * src[ps + j]
    else:
        for j in range(cnt):
            dst[pd + j] += wv * src[ps + j * st]


@njit(**JIT_OPTIONS)
def _row_scatter(dst, pd, st, src, ps, wv, cnt):
    # dst[pd + j * st] += wv * src[ps + j]
    if st == 1:
        for j in range(cnt):
            dst[pd + j] += wv * src[ps + j]
    else:
        for j in range(cnt):
            dst[pd + j * st] += wv * src[ps + j]


@njit(nogil=True, cache=True, fastmath={"reassoc", "nsz"})
def _row_dot(a, pa, b, pb, st, cnt):
    # weight gradients are plain reductions; reassociation lets them vectorise
    acc = a.dtype.type(0)
    if st == 1:
        for j in range(cnt):
            acc += a[pa + j] * b[pb + j]
    else:
        for j in range(cnt):
            acc += a[pa + j] * b[pb + j * st]
    return acc


# Narrow maps (deep pyramid levels) leave too few columns per row for the
# row kernels to pay off; there the channel-last variants vectorise across
# channels instead. Each forward output still accumulates taps in
# (input channel, kernel row, kernel column) order.
NARROW = 16


@njit(**JIT_OPTIONS)
def _conv_fwd_rows(x, w, stride, pad, out):
    n, ic, h, wd = x.shape
    oc, _, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    xf = x.reshape(-1)
    of = out.reshape(-1)
    st = uint64(stride)
    for b in range(n):
        for o in range(oc):
            obase = (b * oc + o) * oh * ow
            for i in range(ic):
                xbase = (b * ic + i) * h * wd
                for ky in range(kh):
                    ylo, yhi = _valid_range(ky, stride, pad, h, oh)
                    for kx in range(kw):
                        xlo, xhi = _valid_range(kx, stride, pad, wd, ow)
                        if xhi <= xlo:
                            continue
                        wv = w[o, i, ky, kx]
                        cnt = uint64(xhi - xlo)
                        for oy in range(ylo, yhi):
                            po = uint64(obase + oy * ow + xlo)
                            px = uint64(xbase + (oy * stride - pad + ky) * wd + xlo * stride - pad + kx)
                            _row_axpy(of, po, xf, px, st, wv, cnt)
    return out


@njit(**JIT_OPTIONS)
def _conv_fwd_channels(x, w, stride, pad, out):
    n, ic, h, wd = x.shape
    oc, _, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    wt = np.ascontiguousarray(w.transpose(1, 2, 3, 0)).reshape(-1)
    ot = np.zeros((n, oh, ow, oc), out.dtype)
    of = ot.reshape(-1)
    noc = uint64(oc)
    for b in range(n):
        for i in range(ic):
            for ky in range(kh):
                ylo, yhi = _valid_range(ky, stride, pad, h, oh)
                for kx in range(kw):
                    xlo, xhi = _valid_range(kx, stride, pad, wd, ow)
                    pw = uint64(((i * kh + ky) * kw + kx) * oc)
                    for oy in range(ylo, yhi):
                        iy = oy * stride - pad + ky
                        for ox in range(xlo, xhi):
                            xv = x[b, i, iy, ox * stride - pad + kx]
                            _row_axpy(of, uint64(((b * oh + oy) * ow + ox) * oc), wt, pw, uint64(1), xv, noc)
    out[...] = ot.transpose(0, 3, 1, 2)
    return out


@njit(**JIT_OPTIONS)
def conv2d_fwd(x, w, stride, pad, out):
    if out.shape[3] < NARROW:
        return _conv_fwd_channels(x, w, stride, pad, out)
    return _conv_fwd_rows(x, w, stride, pad, out)


@njit(**JIT_OPTIONS)
def _conv_bwd_input_rows(dy, w, stride, pad, dx):
    n, oc, oh, ow = dy.shape
    _, ic, kh, kw = w.shape
    h, wd = dx.shape[2], dx.shape[3]
    df = dy.reshape(-1)
    xf = dx.reshape(-1)
    st = uint64(stride)
    for b in range(n):
        for i in range(ic):
            xbase = (b * ic + i) * h * wd
            for o in range(oc):
                obase = (b * oc + o) * oh * ow
                for ky in range(kh):
                    ylo, yhi = _valid_range(ky, stride, pad, h, oh)
                    for kx in range(kw):
                        xlo, xhi = _valid_range(kx, stride, pad, wd, ow)
                        if xhi <= xlo:
                            continue
                        wv = w[o, i, ky, kx]
                        cnt = uint64(xhi - xlo)
                        for oy in range(ylo, yhi):
                            po = uint64(obase + oy * ow + xlo)
                            px = uint64(xbase + (oy * stride - pad + ky) * wd + xlo * stride - pad + kx)
                            _row_scatter(xf, px, st, df, po, wv, cnt)
    return dx


@njit(**JIT_OPTIONS)
def _conv_bwd_input_channels(dy, w, stride, pad, dx):
    n, oc, oh, ow = dy.shape
    _, ic, kh, kw = w.shape
    h, wd = dx.shape[2], dx.shape[3]
    wt = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(-1)
    xt = np.zeros((n, h, wd, ic), dx.dtype)
    xf = xt.reshape(-1)
    nic = uint64(ic)
    for b in range(n):
        for o in range(oc):
            for ky in range(kh):
                ylo, yhi = _valid_range(ky, stride, pad, h, oh)
                for kx in range(kw):
                    xlo, xhi = _valid_range(kx, stride, pad, wd, ow)
                    pw = uint64(((o * kh + ky) * kw + kx) * ic)
                    for oy in range(ylo, yhi):
                        iy = oy * stride - pad + ky
                        for ox in range(xlo, xhi):
                            px = uint64(((b * h + iy) * wd + ox * stride - pad + kx) * ic)
                            _row_axpy(xf, px, wt, pw, uint64(1), dy[b, o, oy, ox], nic)
    dx[:, :, :, :] += xt.transpose(0, 3, 1, 2)
    return dx


@njit(**JIT_OPTIONS)
def conv2d_bwd_input(dy, w, stride, pad, dx):
    if dy.shape[3] < NARROW:
        return _conv_bwd_input_channels(dy, w, stride, pad, dx)
    return _conv_bwd_input_rows(dy, w, stride, pad, dx)


@njit(**JIT_OPTIONS)
def _conv_bwd_weight_rows(dy, x, stride, pad, dw):
    n, oc, oh, ow = dy.shape
    _, ic, h, wd = x.shape
    kh, kw = dw.shape[2], dw.shape[3]
    df = dy.reshape(-1)
    xf = x.reshape(-1)
    st = uint64(stride)
    for o in range(oc):
        for i in range(ic):
            for ky in range(kh):
                ylo, yhi = _valid_range(ky, stride, pad, h, oh)
                for kx in range(kw):
                    xlo, xhi = _valid_range(kx, stride, pad, wd, ow)
                    acc = 0.0
                    if xhi > xlo:
                        cnt = uint64(xhi - xlo)
                        for b in range(n):
                            obase = (b * oc + o) * oh * ow
                            xbase = (b * ic + i) * h * wd
                            for oy in range(ylo, yhi):
                                po = uint64(obase + oy * ow + xlo)
                                px = uint64(xbase + (oy * stride - pad + ky) * wd + xlo * stride - pad + kx)
                                acc += _row_dot(df, po, xf, px, st, cnt)
                    dw[o, i, ky, kx] = acc
    return dw


@njit(**JIT_OPTIONS)
def _conv_bwd_weight_channels(dy, x, stride, pad, dw):
    n, oc, oh, ow = dy.shape
    _, ic, h, wd = x.shape
    kh, kw = dw.shape[2], dw.shape[3]
    dt = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1)
    wt = np.zeros((ic, kh, kw, oc), dw.dtype)
    wf = wt.reshape(-1)
    noc = uint64(oc)
    for b in range(n):
        for i in range(ic):
            for ky in range(kh):
                ylo, yhi = _valid_range(ky, stride, pad, h, oh)
                for kx in range(kw):
                    xlo, xhi = _valid_range(kx, stride, pad, wd, ow)
                    pw = uint64(((i * kh + ky) * kw + kx) * oc)
                    for oy in range(ylo, yhi):
                        iy = oy * stride - pad + ky
                        for ox in range(xlo, xhi):
                            xv = x[b, i, iy, ox * stride - pad + kx]
                            _row_axpy(wf, pw, dt, uint64(((b * oh + oy) * ow + ox) * oc), uint64(1), xv, noc)
    dw[...] = wt.transpose(3, 0, 1, 2)
    return dw


@njit(**JIT_OPTIONS)
def conv2d_bwd_weight(dy, x, stride, pad, dw):
    if dy.shape[3] < NARROW:
        return _conv_bwd_weight_channels(dy, x, stride, pad, dw)
    return _conv_bwd_weight_rows(dy, x, stride, pad, dw)


@njit(**JIT_OPTIONS)
def dwconv2d_fwd(x, w, stride, pad, out):
    n, c, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = out.shape[2], out.shape[3]
    xf = x.reshape(-1)
    of = out.reshape(-1)
    st = uint64(stride)
    for b in range(n):
        for ch in range(c):
            obase = (b * c + ch) * oh * ow
            xbase = (b * c + ch) * h * wd
            for ky in range(kh):
                ylo, yhi = _valid_range(ky, stride, pad, h, oh)
                for kx in range(kw):
                    xlo, xhi = _valid_range(kx, stride, pad, wd, ow)
                    if xhi <= xlo:
                        continue
                    wv = w[ch, 0, ky, kx]
                    cnt = uint64(xhi - xlo)
                    for oy in range(ylo, yhi):
                        po = uint64(obase + oy * ow + xlo)
                        px = uint64(xbase + (oy * stride - pad + ky) * wd + xlo * stride - pad + kx)
                        _row_axpy(of, po, xf, px, st, wv, cnt)
    return out


@njit(**JIT_OPTIONS)
def dwconv2d_bwd_input(dy, w, stride, pad, dx):
    n, c, oh, ow = dy.shape
    kh, kw = w.shape[2], w.shape[3]
    h, wd = dx.shape[2], dx.shape[3]
    df = dy.reshape(-1)
    xf = dx.reshape(-1)
    st = uint64(stride)
    for b in range(n):
        for ch in range(c):
            obase = (b * c + ch) * oh * ow
            xbase = (b * c + ch) * h * wd
            for ky in range(kh):
                ylo, yhi = _valid_range(ky, stride, pad, h, oh)
                for kx in range(kw):
                    xlo, xhi = _valid_range(kx, stride, pad, wd, ow)
                    if xhi <= xlo:
                        continue
                    wv = w[ch, 0, ky, kx]
                    cnt = uint64(xhi - xlo)
                    for oy in range(ylo, yhi):
                        po = uint64(obase + oy * ow + xlo)
                        px = uint64(xbase + (oy * stride - pad + ky) * wd + xlo * stride - pad + kx)
                        _row_scatter(xf, px, st, df, po, wv, cnt)
    return dx


@njit(**JIT_OPTIONS)
def dwconv2d_bwd_weight(dy, x, stride, pad, dw):
    n, c, oh, ow = dy.shape
    h, wd = x.shape[2], x.shape[3]
    kh, kw = dw.shape[2], dw.shape[3]
    df = dy.reshape(-1)
    xf = x.reshape(-1)
    st = uint64(stride)
    for ch in range(c):
        for ky in range(kh):
            ylo, yhi = _valid_range(ky, stride, pad, h, oh)
            for kx in range(kw):
                xlo, xhi = _valid_range(kx, stride, pad, wd, ow)
                acc = 0.0
                if xhi > xlo:
                    cnt = uint64(xhi - xlo)
                    for b in range(n):
                        obase = (b * c + ch) * oh * ow
                        xbase = (b * c + ch) * h * wd
                        for oy in range(ylo, yhi):
                            po = uint64(obase + oy * ow + xlo)
                            px = uint64(xbase + (oy * stride - pad + ky) * wd + xlo * stride - pad + kx)
                            acc += _row_dot(df, po, xf, px, st, cnt)
                dw[ch, 0, ky, kx] = acc
    return dw


@njit(**JIT_OPTIONS)
def avgpool_fwd(x, k, stride, pad, out):
    n, c, h, wd = x.shape
    oh, ow = out.shape[2], out.shape[3]
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    cnt = 0
                    for ky in range(k):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= wd:
                                continue
                            acc += x[b, ch, iy, ix]
                            cnt += 1
                    out[b, ch, oy, ox] = acc / cnt
    return out


@njit(**JIT_OPTIONS)
def avgpool_bwd(dy, k, stride, pad, dx):
    n, c, oh, ow = dy.shape
    h, wd = dx.shape[2], dx.shape[3]
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    y0 = max(oy * stride - pad, 0)
                    y1 = min(oy * stride - pad + k, h)
                    x0 = max(ox * stride - pad, 0)
                    x1 = min(ox * stride - pad + k, wd)
                    g = dy[b, ch, oy, ox] / ((y1 - y0) * (x1 - x0))
                    for iy in range(y0, y1):
                        for ix in range(x0, x1):
                            dx[b, ch, iy, ix] += g
    return dx


@njit(**JIT_OPTIONS)
def maxpool_fwd(x, k, stride, pad, out, idx):
    n, c, h, wd = x.shape
    oh, ow = out.shape[2], out.shape[3]
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    best = -np.inf
                    arg = -1
                    for ky in range(k):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= wd:
                                continue
                            v = x[b, ch, iy, ix]
                            if arg < 0 or v > best:
                                best = v
                                arg = iy * wd + ix
                    out[b, ch, oy, ox] = best
                    idx[b, ch, oy, ox] = arg
    return out


@njit(**JIT_OPTIONS)
def maxpool_bwd(dy, idx, dx):
    n, c, oh, ow = dy.shape
    wd = dx.shape[3]
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    a = idx[b, ch, oy, ox]
                    dx[b, ch, a // wd, a % wd] += dy[b, ch, oy, ox]
    return dx


@njit(**JIT_OPTIONS)
def bilinear_fwd(x, y0, y1, fy, x0, x1, fx, out):
    n, c = x.shape[0], x.shape[1]
    oh, ow = out.shape[2], out.shape[3]
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                ty = fy[oy]
                for ox in range(ow):
                    tx = fx[ox]
                    # lerp form: equal neighbours reproduce their value exactly
                    a = x[b, ch, y0[oy], x0[ox]]
                    top = a + tx * (x[b, ch, y0[oy], x1[ox]] - a)
                    a = x[b, ch, y1[oy], x0[ox]]
                    bot = a + tx * (x[b, ch, y1[oy], x1[ox]] - a)
                    out[b, ch, oy, ox] = top + ty * (bot - top)
    return out


@njit(**JIT_OPTIONS)
def bilinear_bwd(dy, y0, y1, fy, x0, x1, fx, dx):
    n, c, oh, ow = dy.shape
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                ty = fy[oy]
                for ox in range(ow):
                    tx = fx[ox]
                    g = dy[b, ch, oy, ox]
                    dx[b, ch, y0[oy], x0[ox]] += (1.0 - ty) * (1.0 - tx) * g
                    dx[b, ch, y0[oy], x1[ox]] += (1.0 - ty) * tx * g
                    dx[b, ch, y1[oy], x0[ox]] += ty * (1.0 - tx) * g
                    dx[b, ch, y1[oy], x1[ox]] += ty * tx * g
    return dx
