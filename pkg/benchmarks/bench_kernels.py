"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--rows 200000] [--repeat 5]
"""
import argparse
import time

import numpy as np

from meetsync import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    t = np.cumsum(rng.uniform(0.009, 0.011, args.rows))
    v = np.ascontiguousarray(rng.normal(size=(args.rows, 3)))
    x = np.sort(rng.uniform(0, 1800, 1500))
    y = rng.normal(size=1500)
    text = kernels.python.format_table(t, v)

    cases = {
        "format_table": lambda b: b.format_table(t, v),
        "parse_table": lambda b: b.parse_table(text, 4),
        "quantize": lambda b: b.quantize(t),
        "pairwise_slopes(1500)": lambda b: b.pairwise_slopes(x, y),
        "gap_indices": lambda b: b.gap_indices(t, 0.03),
    }
    backends = [kernels.python] + ([kernels.compiled] if kernels.compiled is not None else [])
    print(f"{args.rows} rows x 4 columns, best of {args.repeat}")
    print(f"{'kernel':<24}" + "".join(f"{b.BACKEND:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn in cases.items():
        secs = [best_of(lambda: fn(b), args.repeat) for b in backends]
        row = f"{name:<24}" + "".join(f"{s * 1000:>10.1f}ms" for s in secs)
        if len(secs) == 2:
            row += f"{secs[0] / secs[1]:>11.1f}x"
        print(row)
    if kernels.compiled is None:
        print("compiled extension not built; only the Python backend was measured")


if __name__ == "__main__":
    main()
