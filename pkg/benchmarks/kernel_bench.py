"""Benchmark the numba-compiled kernels against their pure-numpy fallbacks.

Runs each hot kernel on a realistic workload with both implementations and
prints timings plus speedup. The package picks one path at import time via
FIND3D_NO_NUMBA; this script calls both variants directly, so a single run
covers the comparison.

Usage: python benchmarks/kernel_bench.py [--points N] [--repeats R]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from find3d import accel


def timeit(fn, repeats: int) -> float:
    fn()  # warm (JIT compile on the numba path)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--points", type=int, default=200_000)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if not accel.NUMBA_ENABLED:
        print("numba is disabled or unavailable; only the numpy path can run")
        return 1

    rng = np.random.default_rng(0)
    n = args.points
    rows = []

    grid = rng.integers(0, 2**16, size=(3, n)).astype(np.int64)
    rows.append(
        (
            "morton_encode",
            timeit(lambda: accel.morton_encode_nb(grid[0], grid[1], grid[2]), args.repeats),
            timeit(lambda: accel.morton_encode_np(grid[0], grid[1], grid[2]), args.repeats),
        )
    )
    codes = accel.morton_encode_np(grid[0], grid[1], grid[2])
    rows.append(
        (
            "morton_decode",
            timeit(lambda: accel.morton_decode_nb(codes), args.repeats),
            timeit(lambda: accel.morton_decode_np(codes), args.repeats),
        )
    )
    bits = 16
    rows.append(
        (
            "hilbert_encode",
            timeit(lambda: accel.hilbert_encode_nb(grid[0], grid[1], grid[2], bits), args.repeats),
            timeit(lambda: accel.hilbert_encode_np(grid[0], grid[1], grid[2], bits), args.repeats),
        )
    )
    hcodes = accel.hilbert_encode_np(grid[0], grid[1], grid[2], bits)
    rows.append(
        (
            "hilbert_decode",
            timeit(lambda: accel.hilbert_decode_nb(hcodes, bits), args.repeats),
            timeit(lambda: accel.hilbert_decode_np(hcodes, bits), args.repeats),
        )
    )

    # nearest-kept search on a voxelized cloud
    cell = 0.02
    pts = rng.uniform(0, 1, (n // 4, 3))
    g = np.floor(pts / cell).astype(np.int64)
    keys = g[:, 0] | (g[:, 1] << 21) | (g[:, 2] << 42)
    _, first = np.unique(keys, return_index=True)
    kept_pos = np.ascontiguousarray(pts[np.sort(first)])
    kept_grid = g[np.sort(first)]
    kkeys = kept_grid[:, 0] | (kept_grid[:, 1] << 21) | (kept_grid[:, 2] << 42)
    order = np.argsort(kkeys, kind="stable")
    skeys, srows = kkeys[order], order.astype(np.int64)
    dropped = np.ascontiguousarray(rng.uniform(0, 1, (n // 8, 3)))
    dgrid = np.floor(dropped / cell).astype(np.int64)
    rows.append(
        (
            "nearest_kept",
            timeit(
                lambda: accel.nearest_kept_nb(kept_pos, kept_grid, skeys, srows, dropped, dgrid, cell),
                args.repeats,
            ),
            timeit(
                lambda: accel.nearest_kept_np(kept_pos, kept_grid, skeys, srows, dropped, dgrid, cell),
                args.repeats,
            ),
        )
    )

    us = rng.integers(0, 500, n // 4).astype(np.int64)
    vs = rng.integers(0, 500, n // 4).astype(np.int64)
    dep = rng.uniform(1.0, 3.0, n // 4)
    rows.append(
        (
            "splat_zbuffer",
            timeit(lambda: accel.splat_zbuffer_nb(us, vs, dep, 2, 500, 500), args.repeats),
            timeit(lambda: accel.splat_zbuffer_np(us, vs, dep, 2, 500, 500), args.repeats),
        )
    )

    print(f"\nworkload: {n} codes, {len(kept_pos)} kept / {len(dropped)} dropped, {n // 4} splats")
    print(f"{'kernel':<16}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for name, t_nb, t_np in rows:
        print(f"{name:<16}{t_nb * 1e3:>10.2f}ms{t_np * 1e3:>10.2f}ms{t_np / t_nb:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
