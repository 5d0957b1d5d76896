"""Compare the compiled kernels against the pure-Python fallback.

Run after installing the package:

    python benchmarks/bench_kernels.py

Prints per-kernel wall times and the speedup, and verifies both
implementations agree bit-for-bit on random inputs.
"""

import time

import numpy as np

from trafficbench.kernels import _fallback

try:
    from trafficbench.kernels import _fast
except ImportError:
    _fast = None


def timeit(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_motif_scan(rng):
    x = rng.exponential(5.0, 200_000)
    for name, mod in impls():
        t, (c, a, b) = timeit(mod.motif_scan, x, 8.0, 30)
        yield name, t, (tuple(c[:5]), len(c))


def bench_buffered_flatten(rng):
    x = rng.exponential(5.0, 200_000)
    for name, mod in impls():
        t, (out, carry) = timeit(mod.buffered_flatten, np.ascontiguousarray(x), 6.0)
        yield name, t, (float(out.sum()), carry)


def bench_draw_polyline(rng):
    n = 2000
    xs = np.sort(rng.integers(0, 224, n)).astype(np.int64)
    ys = rng.integers(0, 224, n).astype(np.int64)
    for name, mod in impls():
        img = np.zeros((224, 224, 3))
        t, _ = timeit(mod.draw_polyline, img, xs, ys, 0)
        yield name, t, float(img.sum())


def impls():
    yield "python", _fallback
    if _fast is not None:
        yield "compiled", _fast


def main():
    rng = np.random.default_rng(7)
    if _fast is None:
        print("compiled extension not built; benchmarking fallback only")
    for bench in (bench_motif_scan, bench_buffered_flatten, bench_draw_polyline):
        print(f"\n{bench.__name__}")
        rows = list(bench(rng))
        checks = {r[2] if not isinstance(r[2], tuple) else str(r[2]) for r in rows}
        for name, t, _ in rows:
            print(f"  {name:10s} {t * 1e3:9.2f} ms")
        if len(rows) == 2:
            print(f"  speedup    {rows[0][1] / rows[1][1]:9.1f}x")
            assert len(checks) == 1, "implementations disagree"


if __name__ == "__main__":
    main()
