"""Conv kernel backends.

Two lanes implement the same three entry points: a compiled direct-loop lane
(``_fastconv``, Cython) and a numpy lane (``_npconv``, strided patches plus
one BLAS matmul).  Selection happens once at import:

* default (``auto``) - depthwise convolutions, the stencil-shaped hot kernels
  of this op set, run on the compiled lane when it is built (it beats the
  numpy lane 1.1-4x there, see benchmarks/bench_kernels.py); matmul-shaped
  convolutions always run on the numpy lane, where BLAS wins by a wide
  margin.  Without the compiled module everything falls back to numpy.
* ``BNAS_BACKEND=numpy`` - force the numpy lane everywhere.
* ``BNAS_BACKEND=cython`` - force the compiled lane everywhere (raises when it
  is not built).

``BNAS_THREADS`` > 1 splits work across batch chunks.  Forward and input
gradients are computed per example, so lane count never changes those bits;
the kernel gradient reduces per-chunk partial sums in a fixed order, which may
differ from the single-lane result only by float rounding (within 1e-6).
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _npconv

try:
    from . import _fastconv
except ImportError:
    _fastconv = None

COMPILED_AVAILABLE = _fastconv is not None

_requested = os.environ.get("BNAS_BACKEND", "auto").strip().lower() or "auto"
if _requested not in ("auto", "numpy", "cython"):
    raise ImportError(f"BNAS_BACKEND must be auto, numpy or cython, not {_requested!r}")
if _requested == "cython" and not COMPILED_AVAILABLE:
    raise ImportError("BNAS_BACKEND=cython but the compiled kernels are not built")
if _requested == "auto" and not COMPILED_AVAILABLE:
    BACKEND = "numpy"
else:
    BACKEND = _requested

out_hw = _npconv.out_hw

_executor = None
_executor_lanes = 0


def thread_count():
    try:
        lanes = int(os.environ.get("BNAS_THREADS", "1"))
    except ValueError:
        lanes = 1
    return max(lanes, 1)


def _pool(lanes):
    global _executor, _executor_lanes
    if _executor is None or _executor_lanes != lanes:
        if _executor is not None:
            _executor.shutdown(wait=True)
        _executor = ThreadPoolExecutor(max_workers=lanes)
        _executor_lanes = lanes
    return _executor


def _chunks(n, lanes):
    bounds = np.linspace(0, n, lanes + 1).astype(int)
    return [(bounds[i], bounds[i + 1]) for i in range(lanes) if bounds[i] < bounds[i + 1]]


def _c(arr):
    return np.ascontiguousarray(arr)


def _impl(c, cout, groups, op, stride):
    if BACKEND == "numpy":
        return _npconv
    if BACKEND == "cython":
        return _fastconv
    depthwise = groups > 1 and groups == c and cout == c
    if depthwise and (op != "bwd_in" or stride == 1):
        return _fastconv
    return _npconv


def conv2d_forward(x, w, stride=1, padding=0, dilation=1, groups=1):
    x, w = _c(x), _c(w)
    impl = _impl(x.shape[1], w.shape[0], groups, "fwd", stride)
    lanes = thread_count()
    if lanes <= 1 or x.shape[0] < 2 * lanes:
        return impl.conv2d_forward(x, w, stride, padding, dilation, groups)
    spans = _chunks(x.shape[0], lanes)
    parts = _pool(lanes).map(
        lambda s: impl.conv2d_forward(x[s[0]:s[1]], w, stride, padding, dilation, groups), spans
    )
    return np.concatenate(list(parts), axis=0)


def conv2d_backward_input(w, grad_out, h, wd, stride=1, padding=0, dilation=1, groups=1):
    w, grad_out = _c(w), _c(grad_out)
    impl = _impl(w.shape[1] * groups, grad_out.shape[1], groups, "bwd_in", stride)
    lanes = thread_count()
    if lanes <= 1 or grad_out.shape[0] < 2 * lanes:
        return impl.conv2d_backward_input(w, grad_out, h, wd, stride, padding, dilation, groups)
    spans = _chunks(grad_out.shape[0], lanes)
    parts = _pool(lanes).map(
        lambda s: impl.conv2d_backward_input(
            w, grad_out[s[0]:s[1]], h, wd, stride, padding, dilation, groups),
        spans,
    )
    return np.concatenate(list(parts), axis=0)


def conv2d_backward_kernel(x, grad_out, kh, kw, stride=1, padding=0, dilation=1, groups=1):
    x, grad_out = _c(x), _c(grad_out)
    impl = _impl(x.shape[1], grad_out.shape[1], groups, "bwd_k", stride)
    lanes = thread_count()
    if lanes <= 1 or x.shape[0] < 2 * lanes:
        return impl.conv2d_backward_kernel(x, grad_out, kh, kw, stride, padding, dilation, groups)
    spans = _chunks(x.shape[0], lanes)
    parts = list(
        _pool(lanes).map(
            lambda s: impl.conv2d_backward_kernel(
                x[s[0]:s[1]], grad_out[s[0]:s[1]], kh, kw, stride, padding, dilation, groups
            ),
            spans,
        )
    )
    gw = parts[0]
    for part in parts[1:]:
        gw = gw + part
    return gw
