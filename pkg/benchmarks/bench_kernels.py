"""Compiled vs numpy voxel kernels on training-sized volumes.

Usage: python benchmarks/bench_kernels.py [--dims 32 64 64] [--repeat 5] [--json out.json]

Both backends are checked for identical results before timing.
"""
import argparse
import json
import time

import numpy as np

from vasotrack import kernels
from vasotrack.morphology import _PLANES, _UNION


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, nargs=3, default=[32, 64, 64], help="volume Z Y X")
    ap.add_argument("--repeat", type=int, default=5, help="timing repetitions (best is kept)")
    ap.add_argument("--json", help="write results to this JSON file")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    x = rng.random(args.dims, dtype=np.float32)
    n = x.size
    src = rng.integers(0, n, size=n)
    grad = rng.random(n)

    cases = {
        "si (9 planes, min then max)": lambda b: kernels.window_extreme(x, _PLANES, False, True, backend=b),
        "is (9 planes, max then min)": lambda b: kernels.window_extreme(x, _PLANES, True, False, backend=b),
        "erosion (27-voxel cube)": lambda b: kernels.window_extreme(x, _UNION, False, False, backend=b),
        "scatter_add (gradient routing)": lambda b: kernels.scatter_add(src, grad, n, backend=b),
    }
    backends = ["python"] + (["compiled"] if kernels.BACKEND == "compiled" else [])
    results = []
    print(f"volume {tuple(args.dims)}, best of {args.repeat}; active backend: {kernels.BACKEND}")
    print(f"{'kernel':34s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases.items():
        outs = {b: fn(b) for b in backends}
        if len(outs) == 2:
            a, c = outs["python"], outs["compiled"]
            same = all(np.array_equal(p, q) for p, q in zip(a, c)) if isinstance(a, tuple) else np.array_equal(a, c)
            if not same:
                raise SystemExit(f"backends disagree on {name}")
        t = {b: best_of(lambda: fn(b), args.repeat) * 1e3 for b in backends}
        comp = t.get("compiled")
        speed = t["python"] / comp if comp else float("nan")
        print(f"{name:34s} {t['python']:10.2f} {comp if comp else float('nan'):12.2f} {speed:8.1f}x")
        results.append({"kernel": name, "python_ms": t["python"], "compiled_ms": comp, "speedup": speed})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"dims": args.dims, "results": results}, fh, indent=2)


if __name__ == "__main__":
    main()
