"""Time the hot kernels on the compiled and numpy backends.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]
"""
import argparse
import json
import timeit

import numpy as np

from resattunet.kernels import available_backends, load_backend
from resattunet.ops import _align_corners_taps


def cases(rng):
    x = rng.standard_normal((2, 32, 64, 64)).astype(np.float32)
    cols = None

    def im2col(k):
        return lambda: k.im2col(x, 3, 3, 1, 1)

    def col2im(k):
        nonlocal cols
        if cols is None:
            cols = k.im2col(x, 3, 3, 1, 1)
        return lambda: k.col2im(cols, 32, 64, 64, 3, 3, 1, 1)

    def maxpool(k):
        return lambda: k.maxpool2x2(x)

    def maxpool_bwd(k):
        out, idx = k.maxpool2x2(x)
        return lambda: k.maxpool2x2_backward(out, idx)

    taps = _align_corners_taps(64, 128, np.float32)

    def interp(k):
        return lambda: k.interp_last_axis(x, *taps)

    g = rng.standard_normal((2, 32, 64, 128)).astype(np.float32)

    def interp_bwd(k):
        return lambda: k.interp_last_axis_backward(g, *taps, 64)

    return {
        "im2col 2x32x64x64 k3": im2col,
        "col2im 2x32x64x64 k3": col2im,
        "maxpool2x2 fwd": maxpool,
        "maxpool2x2 bwd": maxpool_bwd,
        "interp last axis fwd": interp,
        "interp last axis bwd": interp_bwd,
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()
    backends = available_backends()
    results = {}
    for name, make in cases(np.random.default_rng(0)).items():
        row = {}
        for b in backends:
            fn = make(load_backend(b))
            fn()
            row[b] = min(timeit.repeat(fn, number=3, repeat=args.repeat)) / 3
        results[name] = row
    head = f"{'kernel':26s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else "")
    print(head)
    for name, row in results.items():
        line = f"{name:26s}" + "".join(f"{row[b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) > 1:
            line += f"{row['python'] / row['cython']:11.1f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=2)


if __name__ == "__main__":
    main()
