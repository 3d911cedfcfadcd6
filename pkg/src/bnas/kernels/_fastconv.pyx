# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Direct-loop convolution kernels, compiled lane.

Fixed loop order per example keeps every run bit-identical; accumulation is
done in double even for float32 arrays.
"""

import numpy as np


ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _ceil_pos(Py_ssize_t num, Py_ssize_t den) nogil:
    # ceil(num/den) for den > 0, clamped below at 0
    if num <= 0:
        return 0
    return (num + den - 1) // den


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                   int stride, int padding, int dilation, int groups):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], cg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    cdef Py_ssize_t cog = cout // groups
    out_np = np.zeros((n, cout, ho, wo), dtype=np.asarray(x).dtype)
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t b, g, oc, ic, ch, i, j, p, q, hi, wi
    cdef Py_ssize_t base_h, base_w, p_lo, p_hi, q_lo, q_hi
    cdef double acc
    if cg == 1 and cog == 1:
        # depthwise: hoist the kernel-window bounds out of the inner loop
        with nogil:
            for b in range(n):
                for ch in range(c):
                    for i in range(ho):
                        base_h = i * stride - padding
                        p_lo = _ceil_pos(-base_h, dilation)
                        p_hi = _ceil_pos(h - base_h, dilation)
                        if p_hi > kh:
                            p_hi = kh
                        for j in range(wo):
                            base_w = j * stride - padding
                            q_lo = _ceil_pos(-base_w, dilation)
                            q_hi = _ceil_pos(wd - base_w, dilation)
                            if q_hi > kw:
                                q_hi = kw
                            acc = 0.0
                            for p in range(p_lo, p_hi):
                                hi = base_h + p * dilation
                                for q in range(q_lo, q_hi):
                                    acc = acc + x[b, ch, hi, base_w + q * dilation] * w[ch, 0, p, q]
                            out[b, ch, i, j] = <real> acc
        return out_np
    with nogil:
        for b in range(n):
            for g in range(groups):
                for oc in range(cog):
                    for i in range(ho):
                        for j in range(wo):
                            acc = 0.0
                            for ic in range(cg):
                                for p in range(kh):
                                    hi = i * stride - padding + p * dilation
                                    if hi < 0 or hi >= h:
                                        continue
                                    for q in range(kw):
                                        wi = j * stride - padding + q * dilation
                                        if wi < 0 or wi >= wd:
                                            continue
                                        acc = acc + x[b, g * cg + ic, hi, wi] * w[g * cog + oc, ic, p, q]
                            out[b, g * cog + oc, i, j] = <real> acc
    return out_np


def conv2d_backward_kernel(real[:, :, :, ::1] x, real[:, :, :, ::1] grad_out,
                           int kh, int kw, int stride, int padding, int dilation, int groups):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = grad_out.shape[1], ho = grad_out.shape[2], wo = grad_out.shape[3]
    cdef Py_ssize_t cg = c // groups
    cdef Py_ssize_t cog = cout // groups
    gw_np = np.zeros((cout, cg, kh, kw), dtype=np.asarray(x).dtype)
    cdef real[:, :, :, ::1] gw = gw_np
    cdef Py_ssize_t b, g, oc, ic, ch, i, j, p, q, hi, wi
    cdef Py_ssize_t i_lo, i_hi, j_lo, j_hi
    cdef double acc
    if cg == 1 and cog == 1:
        with nogil:
            for ch in range(c):
                for p in range(kh):
                    i_lo = _ceil_pos(padding - p * dilation, stride)
                    i_hi = _ceil_pos(h + padding - p * dilation, stride)
                    if i_hi > ho:
                        i_hi = ho
                    for q in range(kw):
                        j_lo = _ceil_pos(padding - q * dilation, stride)
                        j_hi = _ceil_pos(wd + padding - q * dilation, stride)
                        if j_hi > wo:
                            j_hi = wo
                        acc = 0.0
                        for b in range(n):
                            for i in range(i_lo, i_hi):
                                hi = i * stride - padding + p * dilation
                                for j in range(j_lo, j_hi):
                                    acc = acc + grad_out[b, ch, i, j] * x[b, ch, hi, j * stride - padding + q * dilation]
                        gw[ch, 0, p, q] = <real> acc
        return gw_np
    with nogil:
        for g in range(groups):
            for oc in range(cog):
                for ic in range(cg):
                    for p in range(kh):
                        for q in range(kw):
                            acc = 0.0
                            for b in range(n):
                                for i in range(ho):
                                    hi = i * stride - padding + p * dilation
                                    if hi < 0 or hi >= h:
                                        continue
                                    for j in range(wo):
                                        wi = j * stride - padding + q * dilation
                                        if wi < 0 or wi >= wd:
                                            continue
                                        acc = acc + grad_out[b, g * cog + oc, i, j] * x[b, g * cg + ic, hi, wi]
                            gw[g * cog + oc, ic, p, q] = <real> acc
    return gw_np


def conv2d_backward_input(real[:, :, :, ::1] w, real[:, :, :, ::1] grad_out,
                          Py_ssize_t h, Py_ssize_t wd,
                          int stride, int padding, int dilation, int groups):
    cdef Py_ssize_t cout = w.shape[0], cg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t n = grad_out.shape[0], ho = grad_out.shape[2], wo = grad_out.shape[3]
    cdef Py_ssize_t c = cg * groups
    cdef Py_ssize_t cog = cout // groups
    gx_np = np.zeros((n, c, h, wd), dtype=np.asarray(w).dtype)
    cdef real[:, :, :, ::1] gx = gx_np
    cdef Py_ssize_t b, g, oc, ic, ch, hi, wi, i, j, p, q, th, tw
    cdef Py_ssize_t p_lo, p_hi, q_lo, q_hi
    cdef double acc
    if cg == 1 and cog == 1 and stride == 1:
        # depthwise stride-1 gather: i = hi + padding - p*dilation
        with nogil:
            for b in range(n):
                for ch in range(c):
                    for hi in range(h):
                        p_lo = _ceil_pos(hi + padding - ho + 1, dilation)
                        p_hi = _ceil_pos(hi + padding + 1, dilation)
                        if p_hi > kh:
                            p_hi = kh
                        for wi in range(wd):
                            q_lo = _ceil_pos(wi + padding - wo + 1, dilation)
                            q_hi = _ceil_pos(wi + padding + 1, dilation)
                            if q_hi > kw:
                                q_hi = kw
                            acc = 0.0
                            for p in range(p_lo, p_hi):
                                i = hi + padding - p * dilation
                                for q in range(q_lo, q_hi):
                                    acc = acc + w[ch, 0, p, q] * grad_out[b, ch, i, wi + padding - q * dilation]
                            gx[b, ch, hi, wi] = <real> acc
        return gx_np
    with nogil:
        for b in range(n):
            for g in range(groups):
                for ic in range(cg):
                    for hi in range(h):
                        for wi in range(wd):
                            acc = 0.0
                            for p in range(kh):
                                th = hi + padding - p * dilation
                                if th < 0 or th % stride != 0:
                                    continue
                                i = th // stride
                                if i >= ho:
                                    continue
                                for q in range(kw):
                                    tw = wi + padding - q * dilation
                                    if tw < 0 or tw % stride != 0:
                                        continue
                                    j = tw // stride
                                    if j >= wo:
                                        continue
                                    for oc in range(cog):
                                        acc = acc + w[g * cog + oc, ic, p, q] * grad_out[b, g * cog + oc, i, j]
                            gx[b, g * cg + ic, hi, wi] = <real> acc
    return gx_np
