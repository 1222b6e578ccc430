"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py --repeat 5 --size 8 128 128
"""
import argparse
import json
import time

import numpy as np

from layerstereo import kernels


def timed(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, nargs=3, default=(8, 128, 128), metavar=("T", "H", "W"))
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true", help="print machine-readable results")
    args = ap.parse_args(argv)

    t, h, w = args.size
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 255, (t, h, w, 3))
    disp = rng.uniform(-12, 12, (t, h, w))
    f_lr, f_rl = rng.normal(0, 4, (2, t, h, w, 2))
    planes = rng.uniform(0, 1, (3 * t, h, w))
    cases = {
        "hwarp": lambda b: kernels.hwarp(img, disp, backend=b),
        "consistency_error": lambda b: kernels.consistency_error(f_lr, f_rl, backend=b),
        "median3": lambda b: kernels.median3(planes, backend=b),
    }
    backends = ["numpy"] + (["cython"] if kernels.BACKEND == "cython" else [])
    results = {}
    for name, fn in cases.items():
        results[name] = {b: timed(lambda: fn(b), args.repeat) for b in backends}
    if args.json:
        print(json.dumps({"size": [t, h, w], "results": results}, indent=2))
        return
    print(f"kernel benchmark on {t}x{h}x{w} (best of {args.repeat}); active backend: {kernels.BACKEND}")
    for name, res in results.items():
        line = f"  {name:18s} numpy {res['numpy'] * 1e3:8.2f} ms"
        if "cython" in res:
            line += f"   cython {res['cython'] * 1e3:8.2f} ms   speedup {res['numpy'] / res['cython']:5.1f}x"
        print(line)


if __name__ == "__main__":
    main()
