"""Convolution kernels on plain numpy: strided patch views plus one batched matmul.

This is the fallback lane; it must match the compiled lane's semantics exactly
(shapes, grouping, zero padding) though floating-point accumulation order may
differ between the two.
"""

import numpy as np


def out_hw(h, w, kh, kw, stride, padding, dilation):
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    return ho, wo


def _pad(x, padding):
    if padding == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


def _patch_view(xp, kh, kw, stride, dilation, ho, wo):
    # read-only view (N, C, kh, kw, ho, wo) into the padded input
    sn, sc, sh, sw = xp.strides
    shape = (xp.shape[0], xp.shape[1], kh, kw, ho, wo)
    strides = (sn, sc, dilation * sh, dilation * sw, stride * sh, stride * sw)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides, writeable=False)


def _grouped_cols(x, kh, kw, stride, padding, dilation, groups, ho, wo):
    n, c, _, _ = x.shape
    cg = c // groups
    xp = _pad(x, padding)
    pat = _patch_view(xp, kh, kw, stride, dilation, ho, wo)
    # (n, groups, cg*kh*kw, ho*wo); the reshape copies out of the strided view
    return pat.reshape(n, groups, cg * kh * kw, ho * wo)


def _is_depthwise(c, cout, groups):
    return groups > 1 and groups == c and cout == c


def _dw_forward(x, w, stride, padding, dilation):
    n, c, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = out_hw(h, wd, kh, kw, stride, padding, dilation)
    xp = _pad(x, padding)
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for p in range(kh):
        h0 = p * dilation
        for q in range(kw):
            w0 = q * dilation
            out += (xp[:, :, h0:h0 + stride * ho:stride, w0:w0 + stride * wo:stride]
                    * w[None, :, 0, p, q, None, None])
    return out


def _dw_backward_input(w, grad_out, h, wd, stride, padding, dilation):
    n, c, ho, wo = grad_out.shape
    kh, kw = w.shape[2], w.shape[3]
    gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=grad_out.dtype)
    for p in range(kh):
        h0 = p * dilation
        for q in range(kw):
            w0 = q * dilation
            gxp[:, :, h0:h0 + stride * ho:stride, w0:w0 + stride * wo:stride] += (
                grad_out * w[None, :, 0, p, q, None, None]
            )
    if padding:
        gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(gxp)


def _dw_backward_kernel(x, grad_out, kh, kw, stride, padding, dilation):
    n, c, h, wd = x.shape
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    xp = _pad(x, padding)
    gw = np.zeros((c, 1, kh, kw), dtype=x.dtype)
    for p in range(kh):
        h0 = p * dilation
        for q in range(kw):
            w0 = q * dilation
            window = xp[:, :, h0:h0 + stride * ho:stride, w0:w0 + stride * wo:stride]
            gw[:, 0, p, q] = (grad_out * window).sum(axis=(0, 2, 3))
    return gw


def conv2d_forward(x, w, stride, padding, dilation, groups):
    n, c, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if _is_depthwise(c, cout, groups):
        return _dw_forward(x, w, stride, padding, dilation)
    ho, wo = out_hw(h, wd, kh, kw, stride, padding, dilation)
    cols = _grouped_cols(x, kh, kw, stride, padding, dilation, groups, ho, wo)
    wmat = w.reshape(groups, cout // groups, cg * kh * kw)
    out = np.matmul(wmat[None], cols)  # (n, groups, cog, ho*wo)
    return np.ascontiguousarray(out.reshape(n, cout, ho, wo))


def conv2d_backward_kernel(x, grad_out, kh, kw, stride, padding, dilation, groups):
    n, c, h, wd = x.shape
    _, cout, ho, wo = grad_out.shape
    if _is_depthwise(c, cout, groups):
        return _dw_backward_kernel(x, grad_out, kh, kw, stride, padding, dilation)
    cg = c // groups
    cols = _grouped_cols(x, kh, kw, stride, padding, dilation, groups, ho, wo)
    go = grad_out.reshape(n, groups, cout // groups, ho * wo)
    gw = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    return np.ascontiguousarray(gw.reshape(cout, cg, kh, kw))


def conv2d_backward_input(w, grad_out, h, wd, stride, padding, dilation, groups):
    n, cout, ho, wo = grad_out.shape
    _, cg, kh, kw = w.shape
    c = cg * groups
    if _is_depthwise(c, cout, groups):
        return _dw_backward_input(w, grad_out, h, wd, stride, padding, dilation)
    wmat = w.reshape(groups, cout // groups, cg * kh * kw)
    go = grad_out.reshape(n, groups, cout // groups, ho * wo)
    gcols = np.matmul(wmat.transpose(0, 2, 1)[None], go)  # (n, groups, cg*kh*kw, L)
    g6 = gcols.reshape(n, c, kh, kw, ho, wo)
    hp, wp = h + 2 * padding, wd + 2 * padding
    gxp = np.zeros((n, c, hp, wp), dtype=grad_out.dtype)
    for p in range(kh):
        h0 = p * dilation
        for q in range(kw):
            w0 = q * dilation
            gxp[:, :, h0:h0 + stride * ho:stride, w0:w0 + stride * wo:stride] += g6[:, :, p, q]
    if padding:
        gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(gxp)
