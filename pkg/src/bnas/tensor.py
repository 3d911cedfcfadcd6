"""Dense NCHW tensor primitives with explicit forward and backward kernels.

No autodiff: every primitive exposes its adjoint directly.  Arrays are plain
numpy, float32 in training; the same code runs in float64 for the gradient
check suites.  Every primitive validates that its output is finite.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import NumericsError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
POOL_WINDOW = 3
POOL_PADDING = 1


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {what}")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1 or self.groups < 1 or self.padding < 0:
            raise ShapeError(f"invalid conv spec {self}")

    def out_hw(self, h, w, kh, kw):
        ho, wo = kernels.out_hw(h, w, kh, kw, self.stride, self.padding, self.dilation)
        if ho < 1 or wo < 1:
            raise ShapeError(f"zero-size conv output for input {h}x{w} with {self}")
        return ho, wo


def _check_conv_shapes(x, w, spec):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and kernel")
    n, c, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if c % spec.groups or cout % spec.groups:
        raise ShapeError(f"groups={spec.groups} must divide channels {c} and {cout}")
    if cg != c // spec.groups:
        raise ShapeError(f"kernel expects {cg * spec.groups} input channels, got {c}")
    return spec.out_hw(h, wd, kh, kw)


def conv2d(x, w, spec=ConvSpec()):
    """Channel-summed 2-D convolution (cross-correlation), zero padded."""
    _check_conv_shapes(x, w, spec)
    y = kernels.conv2d_forward(x, w, spec.stride, spec.padding, spec.dilation, spec.groups)
    return check_finite(y, "conv2d output")


def conv2d_backward(x, w, grad_out, spec=ConvSpec()):
    """Exact adjoint of conv2d: gradients for the input and the kernel."""
    ho, wo = _check_conv_shapes(x, w, spec)
    n, c, h, wd = x.shape
    if grad_out.shape != (n, w.shape[0], ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, w.shape[0], ho, wo)}")
    gx = kernels.conv2d_backward_input(
        w, grad_out, h, wd, spec.stride, spec.padding, spec.dilation, spec.groups
    )
    gw = kernels.conv2d_backward_kernel(
        x, grad_out, w.shape[2], w.shape[3], spec.stride, spec.padding, spec.dilation, spec.groups
    )
    return check_finite(gx, "conv2d input gradient"), check_finite(gw, "conv2d kernel gradient")


def _pool_geometry(h, w, stride):
    ho = (h + 2 * POOL_PADDING - POOL_WINDOW) // stride + 1
    wo = (w + 2 * POOL_PADDING - POOL_WINDOW) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"zero-size pool output for input {h}x{w}")
    return ho, wo


def _pool_patches(x, stride, fill):
    n, c, h, w = x.shape
    ho, wo = _pool_geometry(h, w, stride)
    xp = np.full((n, c, h + 2, w + 2), fill, dtype=x.dtype)
    xp[:, :, 1:h + 1, 1:w + 1] = x
    sn, sc, sh, sw = xp.strides
    shape = (n, c, ho, wo, POOL_WINDOW, POOL_WINDOW)
    strides = (sn, sc, stride * sh, stride * sw, sh, sw)
    pat = np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides, writeable=False)
    return pat, ho, wo


def _pool_counts(h, w, stride, dtype):
    # valid (non-pad) cells under each window; padded cells never count
    ones = np.ones((1, 1, h, w), dtype=dtype)
    pat, _, _ = _pool_patches(ones, stride, 0)
    return pat.sum(axis=(-2, -1))


def pool2d(x, kind, stride=1):
    """3x3 pooling, padding 1.  Padded cells are excluded: max never selects
    one and avg divides by the valid count, so constant inputs stay constant."""
    if kind == "max":
        pat, _, _ = _pool_patches(x, stride, -np.inf)
        y = pat.max(axis=(-2, -1))
    elif kind == "avg":
        pat, _, _ = _pool_patches(x, stride, 0)
        counts = _pool_counts(x.shape[2], x.shape[3], stride, x.dtype)
        y = pat.sum(axis=(-2, -1)) / counts
    else:
        raise ShapeError(f"unknown pool kind {kind!r}")
    return check_finite(np.ascontiguousarray(y), "pool2d output")


def pool2d_backward(x, grad_out, kind, stride=1):
    n, c, h, w = x.shape
    ho, wo = _pool_geometry(h, w, stride)
    if grad_out.shape != (n, c, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, c, ho, wo)}")
    gxp = np.zeros((n, c, h + 2, w + 2), dtype=grad_out.dtype)
    if kind == "max":
        pat, _, _ = _pool_patches(x, stride, -np.inf)
        # first flat index wins ties; window cells enumerate in input order
        idx = pat.reshape(n, c, ho, wo, POOL_WINDOW * POOL_WINDOW).argmax(axis=-1)
        hi = (np.arange(ho) * stride)[None, None, :, None] + idx // POOL_WINDOW
        wi = (np.arange(wo) * stride)[None, None, None, :] + idx % POOL_WINDOW
        b = np.arange(n)[:, None, None, None]
        ch = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (b, ch, hi, wi), grad_out)
    elif kind == "avg":
        counts = _pool_counts(h, w, stride, grad_out.dtype)
        g = grad_out / counts
        for p in range(POOL_WINDOW):
            for q in range(POOL_WINDOW):
                gxp[:, :, p:p + stride * ho:stride, q:q + stride * wo:stride] += g
    else:
        raise ShapeError(f"unknown pool kind {kind!r}")
    return np.ascontiguousarray(gxp[:, :, 1:h + 1, 1:w + 1])


def prelu(x, slope):
    """x for x>0, slope*x otherwise; slope is per channel."""
    if slope.shape != (x.shape[1],):
        raise ShapeError(f"slope count {slope.shape} != channels {x.shape[1]}")
    s = slope[None, :, None, None]
    y = np.where(x > 0, x, s * x)
    return check_finite(y.astype(x.dtype, copy=False), "prelu output")


def prelu_backward(x, slope, grad_out):
    s = slope[None, :, None, None]
    neg = x <= 0
    gx = np.where(neg, grad_out * s, grad_out).astype(grad_out.dtype, copy=False)
    gslope = np.where(neg, grad_out * x, 0).sum(axis=(0, 2, 3), dtype=slope.dtype)
    return gx, gslope


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalization.  Train mode uses batch statistics and updates
    the running buffers in place; eval mode reads the running buffers.
    Returns (y, cache) where cache feeds batch_norm_backward."""
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"{name} shape {arr.shape} != ({c},)")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat.astype(x.dtype, copy=False), gamma, inv_std.astype(x.dtype, copy=False), training)
    return check_finite(y.astype(x.dtype, copy=False), "batch_norm output"), cache


def batch_norm_backward(cache, grad_out):
    xhat, gamma, inv_std, training = cache
    dgamma = (grad_out * xhat).sum(axis=(0, 2, 3), dtype=gamma.dtype)
    dbeta = grad_out.sum(axis=(0, 2, 3), dtype=gamma.dtype)
    dxhat = grad_out * gamma[None, :, None, None]
    if training:
        term = (
            dxhat
            - dxhat.mean(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        )
        gx = inv_std[None, :, None, None] * term
    else:
        gx = dxhat * inv_std[None, :, None, None]
    return gx.astype(grad_out.dtype, copy=False), dgamma, dbeta


def softmax(values):
    """Stable softmax over a 1-D vector."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError("softmax expects a non-empty 1-D vector")
    check_finite(v, "softmax input")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_backward(weights, grad_weights):
    """Adjoint of softmax: weights = softmax(v), returns dL/dv."""
    w = np.asarray(weights, dtype=np.float64)
    g = np.asarray(grad_weights, dtype=np.float64)
    return w * (g - np.dot(w, g))


def global_avg_pool(x):
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out, h, w):
    g = grad_out[:, :, None, None] / (h * w)
    return np.broadcast_to(g, (grad_out.shape[0], grad_out.shape[1], h, w)).astype(
        grad_out.dtype, copy=False
    )


def linear(x, weight, bias):
    """x: (N, F), weight: (K, F), bias: (K,) -> (N, K)."""
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear features {x.shape[1]} != weight {weight.shape[1]}")
    return check_finite(x @ weight.T + bias[None, :], "linear output")


def linear_backward(x, weight, grad_out):
    gx = grad_out @ weight
    gw = grad_out.T @ x
    gb = grad_out.sum(axis=0)
    return gx, gw, gb
