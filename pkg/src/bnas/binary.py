"""Kernel binarization: amplitude/direction decomposition and its update rules.

A full-precision kernel X is split into a non-negative amplitude matrix A
(shared across output channels) and a direction D = sign(X).  The forward pass
uses the scalar view a_hat = mean(A), so the binarized kernel takes values in
{-a_hat, +a_hat}.  Two modes:

* ``xnor`` - a_hat is the closed form mean|X|, refreshed at every forward and
  after every update; A is never gradient-updated.
* ``pcnn`` - A is a learnable matrix updated by its own rule, which keeps it
  non-negative by taking the absolute value after the step.

Gradients follow the straight-through convention: sign passes the upstream
gradient through where |X| <= 1 (the hard-tanh window) and the scalar view's
derivative with respect to A is taken as 1 elementwise.  The gradient-check
suites differentiate exactly these surrogates.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ShapeError

MODES = ("xnor", "pcnn")
DEFAULT_THETA = 1e-4


def sign(x):
    """Sign with sign(0) := +1, so the output is always in {-1, +1}."""
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype, copy=False)


@dataclass
class BinarizedKernel:
    """State for one binarized conv layer: X (Cout, Cin, kh, kw), A (Cin, kh, kw)."""

    x: np.ndarray
    a: np.ndarray
    mode: str
    theta: float = DEFAULT_THETA
    eta1: float = 0.0
    eta2: float = 0.0
    g_xhat: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ShapeError(f"unknown binarization mode {self.mode!r}")
        if self.x.ndim != 4 or self.a.shape != self.x.shape[1:]:
            raise ShapeError(f"amplitude shape {self.a.shape} != kernel slice {self.x.shape[1:]}")
        if self.theta < 0:
            raise ShapeError("theta must be non-negative")
        if np.any(self.a < 0):
            raise NumericsError("amplitudes must be non-negative")
        if self.g_xhat is None:
            self.g_xhat = np.zeros_like(self.x)

    @property
    def a_hat(self):
        return float(self.a.mean(dtype=np.float64))

    def direction(self):
        return sign(self.x)

    def zero_grad(self):
        self.g_xhat[...] = 0.0


@dataclass(frozen=True)
class LossTerms:
    """Loss breakdown for one batch; total is the exact sum of the parts."""

    data: float
    amplitude: float

    @property
    def total(self):
        return self.data + self.amplitude


def new_kernel(shape, mode, theta, rng, dtype=np.float32, eta1=0.0, eta2=0.0):
    """Fresh kernel: He-scaled X, uniform A = mean|X| (so a_hat starts at the
    closed form in both modes)."""
    cout, cin, kh, kw = shape
    scale = np.sqrt(2.0 / (cin * kh * kw))
    x = (rng.standard_normal(shape) * scale).astype(dtype)
    a = np.full(shape[1:], np.abs(x).mean(dtype=np.float64), dtype=dtype)
    return BinarizedKernel(x=x, a=a, mode=mode, theta=theta, eta1=eta1, eta2=eta2)


def binarize(kernel):
    """Binarized view a_hat * sign(X); X itself is untouched.  In xnor mode the
    amplitude is first refreshed to the closed form mean|X|."""
    if not np.all(np.isfinite(kernel.x)):
        raise NumericsError("non-finite full-precision kernel")
    if kernel.mode == "xnor":
        kernel.a[...] = np.abs(kernel.x).mean(dtype=np.float64)
    return (kernel.a_hat * kernel.direction()).astype(kernel.x.dtype, copy=False)


def amplitude_loss(kernel):
    """(theta/2) * sum_i ||X_i - a_hat * D_i||^2."""
    if kernel.theta == 0.0:
        return 0.0
    resid = kernel.x - kernel.a_hat * kernel.direction()
    return float(0.5 * kernel.theta * np.sum(np.square(resid, dtype=np.float64)))


def classification_loss(outputs, targets):
    """(1/2S) * sum_s ||Y_s - Yhat_s||^2 over a batch of S examples."""
    if outputs.shape != targets.shape:
        raise ShapeError(f"outputs {outputs.shape} != targets {targets.shape}")
    s = outputs.shape[0]
    diff = outputs.astype(np.float64) - targets.astype(np.float64)
    return float(0.5 / s * np.sum(diff * diff))


def classification_loss_backward(outputs, targets):
    s = outputs.shape[0]
    return ((outputs - targets) / s).astype(outputs.dtype, copy=False)


def cross_entropy_loss(outputs, targets):
    """Softmax cross-entropy alternative, selectable by config."""
    if outputs.shape != targets.shape:
        raise ShapeError(f"outputs {outputs.shape} != targets {targets.shape}")
    z = outputs.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logprob = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(targets * logprob).sum() / outputs.shape[0])


def cross_entropy_loss_backward(outputs, targets):
    z = outputs.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return ((p - targets) / outputs.shape[0]).astype(outputs.dtype, copy=False)


LOSSES = {
    "mse": (classification_loss, classification_loss_backward),
    "cross_entropy": (cross_entropy_loss, cross_entropy_loss_backward),
}


def grad_kernel(kernel, grad_wrt_xhat):
    """Full-precision kernel gradient: straight-through data term inside the
    |X| <= 1 window plus the amplitude-reconstruction term."""
    if grad_wrt_xhat.shape != kernel.x.shape:
        raise ShapeError(f"grad shape {grad_wrt_xhat.shape} != kernel {kernel.x.shape}")
    window = (np.abs(kernel.x) <= 1.0).astype(kernel.x.dtype)
    delta = grad_wrt_xhat * kernel.a_hat * window
    if kernel.theta:
        delta = delta + kernel.theta * (kernel.x - kernel.a_hat * kernel.direction())
    return delta.astype(kernel.x.dtype, copy=False)


def grad_amplitude(kernel, grad_wrt_xhat):
    """Amplitude gradient, summed over the output-channel axis onto A's shape."""
    if grad_wrt_xhat.shape != kernel.x.shape:
        raise ShapeError(f"grad shape {grad_wrt_xhat.shape} != kernel {kernel.x.shape}")
    d = kernel.direction()
    delta = (grad_wrt_xhat * d).sum(axis=0)
    if kernel.theta:
        resid = kernel.x - kernel.a_hat * d
        delta = delta - kernel.theta * (resid * d).sum(axis=0)
    return delta.astype(kernel.a.dtype, copy=False)


def update_params(kernel, delta_x, delta_a, eta1=None, eta2=None):
    """X <- X - eta1*delta_x; pcnn: A <- |A - eta2*delta_a|; xnor: A <- mean|X|."""
    e1 = kernel.eta1 if eta1 is None else eta1
    e2 = kernel.eta2 if eta2 is None else eta2
    kernel.x -= (e1 * delta_x).astype(kernel.x.dtype, copy=False)
    if kernel.mode == "pcnn":
        kernel.a[...] = np.abs(kernel.a - e2 * delta_a)
    else:
        kernel.a[...] = np.abs(kernel.x).mean(dtype=np.float64)
    return kernel


def binarize_activation(x):
    """Sign-binarize activations; returns (y, cache) for the backward pass."""
    return sign(x), x


def binarize_activation_backward(cache, grad_out):
    """Straight-through: pass gradient where |input| <= 1, zero elsewhere."""
    window = np.abs(cache) <= 1.0
    return np.where(window, grad_out, 0).astype(grad_out.dtype, copy=False)
