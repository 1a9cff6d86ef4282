#!/usr/bin/env python3
"""Time the numba and pure-numpy paths of the two hot kernels.

Sliding slab maximum over a CT-sized volume and proximity grouping of
candidate boxes. Both paths are checked for identical output first.

Usage:
    python3 benchmarks/bench_kernels.py [--slices N] [--size S] [--boxes B] [--repeat R]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from mipcad import _kernels


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_sliding_max(args, rng) -> list[tuple]:
    vol = rng.integers(-1024, 3000, size=(args.slices, args.size, args.size)).astype(np.int16)
    rows = []
    for t in (5, 10, 15):
        before = t // 2
        ref = _kernels.sliding_max_axis0(vol, t, before, use_numba=False)
        if _kernels.HAS_NUMBA:
            np.testing.assert_array_equal(_kernels.sliding_max_axis0(vol, t, before, use_numba=True), ref)
        np_s = best_of(lambda: _kernels.sliding_max_axis0(vol, t, before, use_numba=False), args.repeat)
        nb_s = best_of(lambda: _kernels.sliding_max_axis0(vol, t, before, use_numba=True), args.repeat) if _kernels.HAS_NUMBA else float("nan")
        rows.append((f"slab max t={t} {vol.shape}", np_s, nb_s))
    return rows


def bench_grouping(args, rng) -> list[tuple]:
    xyz = np.column_stack([rng.uniform(0, 512, args.boxes), rng.uniform(0, 512, args.boxes), rng.uniform(0, 300, args.boxes)])
    side = rng.uniform(3, 30, args.boxes)
    ztol = rng.choice([1.0, 5.0, 10.0, 15.0], args.boxes)
    ref = _kernels.group_by_proximity(xyz, side, ztol, 1.1, use_numba=False)
    if _kernels.HAS_NUMBA:
        np.testing.assert_array_equal(_kernels.group_by_proximity(xyz, side, ztol, 1.1, use_numba=True), ref)
    np_s = best_of(lambda: _kernels.group_by_proximity(xyz, side, ztol, 1.1, use_numba=False), args.repeat)
    nb_s = best_of(lambda: _kernels.group_by_proximity(xyz, side, ztol, 1.1, use_numba=True), args.repeat) if _kernels.HAS_NUMBA else float("nan")
    return [(f"grouping {args.boxes} boxes", np_s, nb_s)]


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--slices", type=int, default=300)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--boxes", type=int, default=2000)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    rng = np.random.default_rng(args.seed)

    if not _kernels.HAS_NUMBA:
        print("numba not installed: only the numpy path is timed")
    rows = bench_sliding_max(args, rng) + bench_grouping(args, rng)  # first numba calls also compile
    print(f"{'kernel':40s} {'numpy (s)':>10s} {'numba (s)':>10s} {'speedup':>8s}")
    for name, np_s, nb_s in rows:
        print(f"{name:40s} {np_s:10.4f} {nb_s:10.4f} {np_s / nb_s:7.1f}x")


if __name__ == "__main__":
    main()
