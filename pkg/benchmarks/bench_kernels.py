"""Time each hot kernel on its numba and numpy paths.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Both paths are imported side by side, so the NRVM_DISABLE_NUMBA flag does not
matter here. Compile time is excluded (one warm-up call per kernel).
"""

import argparse
import json
import timeit

import numpy as np

from nrvm import kernels


def cases(rng):
    src = rng.random((128, 128, 3))
    disp = rng.integers(0, 4, (128, 128)).astype(np.float64)
    holes = rng.random((128, 128)) < 0.05
    holes[40:60, 30:70] = True
    d = np.sort(rng.exponential(0.3, 200_000))
    xi = rng.random(400_000)
    xp = rng.random((64, 34, 34, 16)).astype(np.float32)
    ho = wo = 16
    cols = rng.random((64 * ho * wo, 9 * 16)).astype(np.float32)
    vals = rng.random((13, 13))

    def balance(fn):
        n = d.size
        out = np.empty(10_000, dtype=np.int64)
        return lambda: fn(d, xi, 0.01, np.arange(n + 2), np.arange(n + 2), out, 0, 10_000, 0, 100_000)

    return {
        "splat 128x128": (lambda: kernels._splat_nb(src, disp, 1.0, 1.0), lambda: kernels._splat_np(src, disp, 1.0, 1.0)),
        "nearest_valid 128x128": (lambda: kernels._nearest_valid_nb(holes), lambda: kernels._nearest_valid_np(holes)),
        "balance 200k->10k": (balance(kernels._balance_nb), balance(kernels._balance_loop)),
        "im2col 64x34x34x16": (lambda: kernels._im2col_nb(xp, 3, 2, ho, wo), lambda: kernels._im2col_np(xp, 3, 2, ho, wo)),
        "col2im 64x34x34x16": (
            lambda: kernels._col2im_nb(cols, 64, 34, 34, 16, 3, 2, ho, wo),
            lambda: kernels._col2im_np(cols, 64, 34, 34, 16, 3, 2, ho, wo),
        ),
        "accumulate 13x13 windows": (
            lambda: kernels._accumulate_windows_nb(vals, 128, 128, 8, 32),
            lambda: kernels._accumulate_windows_np(vals, 128, 128, 8, 32),
        ),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if kernels._splat_nb is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rows = []
    for name, (fast, slow) in cases(np.random.default_rng(0)).items():
        fast(), slow()  # warm-up / JIT
        t_nb = min(timeit.repeat(fast, number=1, repeat=args.repeat))
        t_np = min(timeit.repeat(slow, number=1, repeat=args.repeat))
        rows.append({"kernel": name, "numba_ms": 1e3 * t_nb, "numpy_ms": 1e3 * t_np, "speedup": t_np / t_nb})
    print(f"{'kernel':<26} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for r in rows:
        print(f"{r['kernel']:<26} {r['numba_ms']:>10.2f} {r['numpy_ms']:>10.2f} {r['speedup']:>7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
