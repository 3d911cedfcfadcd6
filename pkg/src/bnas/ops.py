"""The candidate operation library.

Eight operations per edge: none, skip, two poolings, two depthwise-separable
convs and two dilated convs, each buildable at three precisions:

* ``full``    - plain float kernels, ReLU activations
* ``bnn``     - conv kernels binarized, full-precision activations
* ``one_bit`` - kernels binarized and every conv input sign-binarized; ReLU is
  replaced by PReLU so negative responses survive

Layers implement explicit forward/backward pairs and accumulate parameter
gradients in place.  Pooling, skip and none are identical across precisions;
factorized-reduce and the preprocessing adapters stay full-precision.
"""

import numpy as np

from . import binary, tensor
from .errors import ShapeError, UsageError

PRIMITIVES = (
    "none",
    "skip_connect",
    "max_pool_3x3",
    "avg_pool_3x3",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
)

PRECISIONS = ("full", "bnn", "one_bit")


class Param:
    """A trainable array with its gradient accumulator."""

    __slots__ = ("value", "grad", "decay")

    def __init__(self, value, decay=True):
        self.value = value
        self.grad = np.zeros_like(value)
        self.decay = decay


class Layer:
    def forward(self, x, training):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def children(self):
        return ()

    def arrays(self, prefix=""):
        """Yield (name, kind, obj) with kind in {param, kernel, buffer}."""
        yield from ()

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise UsageError(f"{type(self).__name__}.backward before forward")
        self._cache = None
        return cache


def walk_arrays(layer, prefix=""):
    yield from layer.arrays(prefix)
    for name, child in layer.children():
        yield from walk_arrays(child, f"{prefix}{name}.")


def collect_params(layer):
    return [obj for _, kind, obj in walk_arrays(layer) if kind == "param"]


def collect_kernels(layer):
    return [obj for _, kind, obj in walk_arrays(layer) if kind == "kernel"]


def zero_grads(layer):
    for _, kind, obj in walk_arrays(layer):
        if kind == "param":
            obj.grad[...] = 0.0
        elif kind == "kernel":
            obj.zero_grad()


def count_weights(layer):
    """Learnable weight count: plain params plus binarized X planes
    (amplitude matrices and norm buffers excluded)."""
    total = 0
    for _, kind, obj in walk_arrays(layer):
        if kind == "param":
            total += obj.value.size
        elif kind == "kernel":
            total += obj.x.size
    return total


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, training):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def children(self):
        return [(str(i), layer) for i, layer in enumerate(self.layers)]


class ReLU(Layer):
    def forward(self, x, training):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad_out):
        mask = self._take_cache()
        return np.where(mask, grad_out, 0).astype(grad_out.dtype, copy=False)


class PReLU(Layer):
    def __init__(self, channels, dtype=np.float32, init=0.25):
        self.slope = Param(np.full(channels, init, dtype=dtype), decay=False)

    def forward(self, x, training):
        self._cache = x
        return tensor.prelu(x, self.slope.value)

    def backward(self, grad_out):
        x = self._take_cache()
        gx, gslope = tensor.prelu_backward(x, self.slope.value, grad_out)
        self.slope.grad += gslope
        return gx

    def arrays(self, prefix=""):
        yield f"{prefix}slope", "param", self.slope


class BatchNorm(Layer):
    def __init__(self, channels, dtype=np.float32):
        self.gamma = Param(np.ones(channels, dtype=dtype), decay=False)
        self.beta = Param(np.zeros(channels, dtype=dtype), decay=False)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x, training):
        y, self._cache = tensor.batch_norm(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var, training
        )
        return y

    def backward(self, grad_out):
        cache = self._take_cache()
        gx, dgamma, dbeta = tensor.batch_norm_backward(cache, grad_out)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return gx

    def arrays(self, prefix=""):
        yield f"{prefix}gamma", "param", self.gamma
        yield f"{prefix}beta", "param", self.beta
        yield f"{prefix}running_mean", "buffer", self.running_mean
        yield f"{prefix}running_var", "buffer", self.running_var


class Conv(Layer):
    """Bias-free conv; the kernel is a plain Param or a BinarizedKernel.
    With ``binarize_input`` the input is sign-binarized first (1-bit lane)."""

    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0, dilation=1, groups=1,
                 binarized=False, binarize_input=False, bin_mode="xnor",
                 theta=binary.DEFAULT_THETA, dtype=np.float32):
        self.spec = tensor.ConvSpec(stride=stride, padding=padding, dilation=dilation, groups=groups)
        shape = (c_out, c_in // groups, k, k)
        if binarized:
            self.kernel = binary.new_kernel(shape, mode=bin_mode, theta=theta, rng=rng, dtype=dtype)
            self.weight = None
        else:
            scale = np.sqrt(2.0 / (shape[1] * k * k))
            self.weight = Param((rng.standard_normal(shape) * scale).astype(dtype))
            self.kernel = None
        self.binarize_input = binarize_input

    def forward(self, x, training):
        act_cache = None
        if self.binarize_input:
            x, act_cache = binary.binarize_activation(x)
        w_eff = binary.binarize(self.kernel) if self.kernel is not None else self.weight.value
        y = tensor.conv2d(x, w_eff, self.spec)
        self._cache = (x, w_eff, act_cache)
        return y

    def backward(self, grad_out):
        x, w_eff, act_cache = self._take_cache()
        gx, gw = tensor.conv2d_backward(x, w_eff, grad_out, self.spec)
        if self.kernel is not None:
            self.kernel.g_xhat += gw
        else:
            self.weight.grad += gw
        if act_cache is not None:
            gx = binary.binarize_activation_backward(act_cache, gx)
        return gx

    def arrays(self, prefix=""):
        if self.kernel is not None:
            yield f"{prefix}kernel", "kernel", self.kernel
        else:
            yield f"{prefix}w", "param", self.weight


class Pool(Layer):
    def __init__(self, kind, stride):
        self.kind = kind
        self.stride = stride

    def forward(self, x, training):
        self._cache = x
        return tensor.pool2d(x, self.kind, self.stride)

    def backward(self, grad_out):
        x = self._take_cache()
        return tensor.pool2d_backward(x, grad_out, self.kind, self.stride)


class Identity(Layer):
    def forward(self, x, training):
        self._cache = True
        return x

    def backward(self, grad_out):
        self._take_cache()
        return grad_out


class Zero(Layer):
    """The 'none' operation: zeros, spatially reduced when strided."""

    def __init__(self, stride):
        self.stride = stride

    def forward(self, x, training):
        n, c, h, w = x.shape
        self._cache = x.shape
        ho = -(-h // self.stride)
        wo = -(-w // self.stride)
        return np.zeros((n, c, ho, wo), dtype=x.dtype)

    def backward(self, grad_out):
        shape = self._take_cache()
        return np.zeros(shape, dtype=grad_out.dtype)


class FactorizedReduce(Layer):
    """Stride-2 identity surrogate: two offset stride-2 1x1 convs, channel
    concatenated, then norm.  Always full-precision."""

    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        if c_out % 2:
            raise ShapeError("factorized reduce needs an even output channel count")
        self.relu = ReLU()
        self.conv1 = Conv(c_in, c_out // 2, 1, rng, stride=2, dtype=dtype)
        self.conv2 = Conv(c_in, c_out // 2, 1, rng, stride=2, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype=dtype)

    def forward(self, x, training):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"factorized reduce needs even spatial dims, got {x.shape}")
        a = self.relu.forward(x, training)
        y1 = self.conv1.forward(a, training)
        y2 = self.conv2.forward(np.ascontiguousarray(a[:, :, 1:, 1:]), training)
        self._cache = a.shape
        return self.bn.forward(np.concatenate([y1, y2], axis=1), training)

    def backward(self, grad_out):
        a_shape = self._take_cache()
        g = self.bn.backward(grad_out)
        half = g.shape[1] // 2
        ga = self.conv1.backward(np.ascontiguousarray(g[:, :half]))
        ga2 = self.conv2.backward(np.ascontiguousarray(g[:, half:]))
        full = np.zeros(a_shape, dtype=grad_out.dtype)
        full += ga
        full[:, :, 1:, 1:] += ga2
        return self.relu.backward(full)

    def children(self):
        return [("conv1", self.conv1), ("conv2", self.conv2), ("bn", self.bn)]


class ReLUConvBN(Layer):
    """Input adapter: ReLU -> 1x1 conv -> norm.  Full-precision unless the
    preprocess-binarization flag is set at network level."""

    def __init__(self, c_in, c_out, rng, k=1, stride=1, padding=0, binarized=False,
                 theta=binary.DEFAULT_THETA, dtype=np.float32):
        self.body = Sequential([
            ReLU(),
            Conv(c_in, c_out, k, rng, stride=stride, padding=padding,
                 binarized=binarized, theta=theta, dtype=dtype),
            BatchNorm(c_out, dtype=dtype),
        ])

    def forward(self, x, training):
        return self.body.forward(x, training)

    def backward(self, grad_out):
        return self.body.backward(grad_out)

    def children(self):
        return [("body", self.body)]


def _activation(channels, precision, dtype):
    return PReLU(channels, dtype=dtype) if precision == "one_bit" else ReLU()


def _conv_block(channels, k, stride, dilation, precision, bin_mode, theta, rng, dtype,
                fp_pointwise):
    """activation -> depthwise k x k -> pointwise 1x1 -> norm."""
    binarized = precision in ("bnn", "one_bit")
    binarize_input = precision == "one_bit"
    padding = dilation * (k - 1) // 2
    return Sequential([
        _activation(channels, precision, dtype),
        Conv(channels, channels, k, rng, stride=stride, padding=padding, dilation=dilation,
             groups=channels, binarized=binarized, binarize_input=binarize_input,
             bin_mode=bin_mode, theta=theta, dtype=dtype),
        Conv(channels, channels, 1, rng, binarized=binarized and not fp_pointwise,
             binarize_input=binarize_input, bin_mode=bin_mode, theta=theta, dtype=dtype),
        BatchNorm(channels, dtype=dtype),
    ])


class OpInstance:
    """One candidate operation bound to an edge position."""

    def __init__(self, kind, channels, stride, precision, module):
        self.kind = kind
        self.channels = channels
        self.stride = stride
        self.precision = precision
        self.module = module

    def forward(self, x, training):
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.kind} expects {self.channels} channels, got {x.shape[1]}")
        return self.module.forward(x, training)

    def backward(self, grad_out):
        return self.module.backward(grad_out)

    def num_params(self):
        return count_weights(self.module)

    def arrays(self, prefix=""):
        return walk_arrays(self.module, prefix)


def build_op(kind, channels, stride, precision, rng, bin_mode="xnor",
             theta=binary.DEFAULT_THETA, dtype=np.float32, fp_pointwise=False):
    if kind not in PRIMITIVES:
        raise ShapeError(f"unknown op kind {kind!r}")
    if precision not in PRECISIONS:
        raise ShapeError(f"unknown precision {precision!r}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if kind == "none":
        module = Zero(stride)
    elif kind == "skip_connect":
        module = Identity() if stride == 1 else FactorizedReduce(channels, channels, rng, dtype=dtype)
    elif kind == "max_pool_3x3":
        module = Pool("max", stride)
    elif kind == "avg_pool_3x3":
        module = Pool("avg", stride)
    elif kind in ("sep_conv_3x3", "sep_conv_5x5"):
        k = 3 if kind == "sep_conv_3x3" else 5
        module = Sequential([
            _conv_block(channels, k, stride, 1, precision, bin_mode, theta, rng, dtype, fp_pointwise),
            _conv_block(channels, k, 1, 1, precision, bin_mode, theta, rng, dtype, fp_pointwise),
        ])
    else:  # dil_conv_3x3 / dil_conv_5x5
        k = 3 if kind == "dil_conv_3x3" else 5
        module = _conv_block(channels, k, stride, 2, precision, bin_mode, theta, rng, dtype, fp_pointwise)
    return OpInstance(kind, channels, stride, precision, module)
