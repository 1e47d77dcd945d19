"""Compare the numba and numpy kernel backends on tile-sized workloads.

Runs itself twice in subprocesses (ARK_NUMBA=1 and ARK_NUMBA=0) so each
backend is selected at import time, then prints a side-by-side table.
JIT warm-up is excluded by running one untimed call first.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

TILE = 1024
N_POINTS = 1_000_000


def make_workloads(rng: np.random.Generator) -> dict:
    # irregular 64-gon plus a star-shaped hole, in pixel-center space
    t = np.linspace(0, 2 * np.pi, 65)[:-1]
    r_out = 400 * (1 + 0.25 * np.sin(5 * t))
    outer = np.stack([512 + r_out * np.cos(t), 512 + r_out * np.sin(t)], axis=1)
    r_in = 120 * (1 + 0.4 * np.sin(7 * t))
    inner = np.stack([512 + r_in * np.cos(-t), 512 + r_in * np.sin(-t)], axis=1)
    xs = np.concatenate([outer[:, 0], inner[:, 0]])
    ys = np.concatenate([outer[:, 1], inner[:, 1]])
    offsets = np.array([0, len(outer), len(outer) + len(inner)], dtype=np.int64)

    grid_y, grid_x = np.mgrid[0:TILE, 0:TILE]
    px = (grid_x + 0.5).astype(np.float64).ravel()
    py = (grid_y + 0.5).astype(np.float64).ravel()

    cols = rng.integers(-8, TILE + 8, size=N_POINTS).astype(np.int64)
    rows = rng.integers(-8, TILE + 8, size=N_POINTS).astype(np.int64)

    src = rng.normal(size=(TILE, TILE))
    g_cols = rng.integers(-4, TILE + 4, size=N_POINTS).astype(np.int64)
    g_rows = rng.integers(-4, TILE + 4, size=N_POINTS).astype(np.int64)

    return {
        "polygon_mask": (px, py, xs, ys, offsets),
        "bin_points": (cols, rows, TILE, TILE),
        "nearest_gather": (src, g_cols, g_rows, float("nan")),
    }


def run_backend(repeat: int) -> dict:
    from ark import kernels

    rng = np.random.default_rng(42)
    work = make_workloads(rng)
    results = {"backend": kernels.BACKEND, "timings": {}, "checksums": {}}
    for name, args in work.items():
        fn = getattr(kernels, name)
        out = fn(*args)  # warm-up; also the checksum source
        times = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn(*args)
            times.append(time.perf_counter() - t0)
        results["timings"][name] = min(times)
        arr = np.asarray(out)
        results["checksums"][name] = float(np.nansum(arr.astype(np.float64)))
    return results


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--_child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args._child:
        print(json.dumps(run_backend(args.repeat)))
        return

    reports = {}
    for flag in ("1", "0"):
        env = dict(os.environ, ARK_NUMBA=flag)
        proc = subprocess.run(
            [sys.executable, __file__, "--_child", "--repeat", str(args.repeat)],
            env=env, capture_output=True, text=True,
        )
        if proc.returncode != 0:
            sys.stderr.write(proc.stderr)
            raise SystemExit(f"backend run with ARK_NUMBA={flag} failed")
        reports[flag] = json.loads(proc.stdout.strip().splitlines()[-1])

    numba_r, numpy_r = reports["1"], reports["0"]
    for name in numba_r["checksums"]:
        a, b = numba_r["checksums"][name], numpy_r["checksums"][name]
        if a != b and not (np.isnan(a) and np.isnan(b)):
            raise SystemExit(f"{name}: backends disagree ({a} vs {b})")

    print(f"{'kernel':<16} {'numba':>10} {'numpy':>10} {'speedup':>8}")
    for name, t_nb in numba_r["timings"].items():
        t_np = numpy_r["timings"][name]
        print(f"{name:<16} {t_nb * 1e3:>8.2f}ms {t_np * 1e3:>8.2f}ms "
              f"{t_np / t_nb:>7.2f}x")
    print("\nchecksums agree across backends; "
          f"workload: {TILE}x{TILE} tile, {N_POINTS:,} points, "
          f"best of {args.repeat}")


if __name__ == "__main__":
    main()
