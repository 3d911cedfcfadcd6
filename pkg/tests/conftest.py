"""Shared test oracles: a brute-force convolution and finite differences.

These stay independent of the package kernels so they can arbitrate them.
"""

import numpy as np
import pytest


def brute_conv2d(x, w, stride=1, padding=0, dilation=1, groups=1):
    """Nested-loop reference convolution in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    cog = cout // groups
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for g in range(groups):
            for oc in range(cog):
                for i in range(ho):
                    for j in range(wo):
                        acc = 0.0
                        for ic in range(cg):
                            for p in range(kh):
                                hi = i * stride - padding + p * dilation
                                if not 0 <= hi < h:
                                    continue
                                for q in range(kw):
                                    wi = j * stride - padding + q * dilation
                                    if not 0 <= wi < wd:
                                        continue
                                    acc += x[b, g * cg + ic, hi, wi] * w[g * cog + oc, ic, p, q]
                        out[b, g * cog + oc, i, j] = acc
    return out


def central_diff(f, x, eps=1e-4):
    """Central finite differences of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)


def make_test_kernel(rng, shape, mode, theta, margin=1e-2):
    """Float64 kernel whose X elements avoid the sign boundary and the
    straight-through edge by `margin` on both sides."""
    from bnas.binary import BinarizedKernel

    mag = rng.uniform(5 * margin, 1.0 - 5 * margin, shape)
    signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    x = mag * signs
    a = np.full(shape[1:], np.abs(x).mean())
    return BinarizedKernel(x=x, a=a, mode=mode, theta=theta)


def binarized_grad_fd_errors(kernel, inp, targets, eps=1e-4):
    """Relative errors of the analytic kernel/amplitude gradients against
    64-bit central finite differences of the total loss.

    The sign function is differentiated through its straight-through
    surrogates with the other decomposition factors frozen, which is exactly
    the function the analytic rules are derivatives of: for X the binarized
    weights become a_hat*clip(X, -1, 1) with a_hat and D fixed; for A they
    become A*D elementwise with D and X fixed (A starts uniform, making its
    scalar view exact).
    """
    from bnas import binary, tensor

    a_hat = kernel.a_hat
    d = kernel.direction()
    x0 = kernel.x
    theta = kernel.theta

    def loss_x(xv):
        w = a_hat * np.clip(xv, -1.0, 1.0)
        out = tensor.conv2d(inp, w)
        val = binary.classification_loss(out, targets)
        return val + 0.5 * theta * float(np.sum((xv - a_hat * d) ** 2))

    def loss_a(av):
        w = av[None] * d
        out = tensor.conv2d(inp, w)
        val = binary.classification_loss(out, targets)
        return val + 0.5 * theta * float(np.sum((x0 - av[None] * d) ** 2))

    w0 = a_hat * np.clip(x0, -1.0, 1.0)
    out = tensor.conv2d(inp, w0)
    gl = binary.classification_loss_backward(out, targets)
    _, g_xhat = tensor.conv2d_backward(inp, w0, gl)
    delta_x = binary.grad_kernel(kernel, g_xhat)
    err_x = rel_err(delta_x, central_diff(loss_x, x0, eps))

    w0 = a_hat * d
    out = tensor.conv2d(inp, w0)
    gl = binary.classification_loss_backward(out, targets)
    _, g_xhat = tensor.conv2d_backward(inp, w0, gl)
    delta_a = binary.grad_amplitude(kernel, g_xhat)
    err_a = rel_err(delta_a, central_diff(loss_a, kernel.a.copy(), eps))
    return err_x, err_a


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
