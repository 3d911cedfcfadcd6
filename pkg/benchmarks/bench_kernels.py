"""Benchmark the conv kernel lanes (compiled vs numpy) on search-shaped work.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from bnas.kernels import _npconv

try:
    from bnas.kernels import _fastconv
except ImportError:
    _fastconv = None

CASES = [
    # label, (n, c, h, w), (cout, k), stride, padding, dilation, groups
    ("stem 3x3", (64, 3, 32, 32), (24, 3), 1, 1, 1, 1),
    ("pointwise 1x1", (64, 16, 16, 16), (16, 1), 1, 0, 1, 1),
    ("depthwise 3x3", (64, 16, 16, 16), (16, 3), 1, 1, 1, 16),
    ("depthwise 5x5 s2", (64, 16, 16, 16), (16, 5), 2, 2, 1, 16),
    ("dilated 3x3", (64, 16, 16, 16), (16, 3), 1, 2, 2, 16),
    ("reduce 1x1 s2", (64, 32, 16, 16), (16, 1), 2, 0, 1, 1),
]


def run_case(impl, case, repeat):
    label, xshape, (cout, k), stride, padding, dilation, groups = case
    rng = np.random.default_rng(0)
    x = rng.standard_normal(xshape).astype(np.float32)
    w = rng.standard_normal((cout, xshape[1] // groups, k, k)).astype(np.float32)
    y = impl.conv2d_forward(x, w, stride, padding, dilation, groups)
    g = np.ones_like(y)
    timings = {}
    for name, fn in [
        ("fwd", lambda: impl.conv2d_forward(x, w, stride, padding, dilation, groups)),
        ("bwd_in", lambda: impl.conv2d_backward_input(
            w, g, xshape[2], xshape[3], stride, padding, dilation, groups)),
        ("bwd_k", lambda: impl.conv2d_backward_kernel(
            x, g, k, k, stride, padding, dilation, groups)),
    ]:
        fn()  # warm
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        timings[name] = (time.perf_counter() - t0) / repeat * 1000.0
    return timings


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    lanes = [("numpy", _npconv)]
    if _fastconv is not None:
        lanes.append(("cython", _fastconv))
    else:
        print("compiled lane not built; benchmarking numpy only")
    header = f"{'case':<20}" + "".join(
        f"{lane + ' ' + op:>16}" for lane, _ in lanes for op in ("fwd", "bwd_in", "bwd_k")
    )
    print(header)
    print("-" * len(header))
    results = {}
    for case in CASES:
        row = f"{case[0]:<20}"
        for lane, impl in lanes:
            t = run_case(impl, case, args.repeat)
            results[(case[0], lane)] = t
            row += "".join(f"{t[op]:>14.2f}ms" for op in ("fwd", "bwd_in", "bwd_k"))
        print(row)
    if _fastconv is not None:
        print()
        print(f"{'case':<20}{'speedup fwd':>14}{'bwd_in':>10}{'bwd_k':>10}   (numpy time / cython time)")
        for case in CASES:
            np_t = results[(case[0], "numpy")]
            cy_t = results[(case[0], "cython")]
            print(f"{case[0]:<20}"
                  f"{np_t['fwd'] / cy_t['fwd']:>13.2f}x"
                  f"{np_t['bwd_in'] / cy_t['bwd_in']:>9.2f}x"
                  f"{np_t['bwd_k'] / cy_t['bwd_k']:>9.2f}x")


if __name__ == "__main__":
    main()
