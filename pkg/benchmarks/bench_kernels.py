"""Benchmark the compiled kernel backend against the pure-numpy fallback.

Runs the hot kernels (im2col / col2im / maxpool and its backward pass) and
a full group-convolution forward on both backends and prints a timing
table. Run twice to compare:

    python3 benchmarks/bench_kernels.py
    SE2VAE_FORCE_PYTHON=1 python3 benchmarks/bench_kernels.py

or let the script spawn the fallback run itself (the default): it re-execs
itself with SE2VAE_FORCE_PYTHON=1 and merges the two tables.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _bench(fn, *args, repeats=5, warmup=1):
    for _ in range(warmup):
        fn(*args)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def run_cases(repeats: int) -> dict:
    from se2vae import backend_name
    from se2vae.backend import kernels
    from se2vae.rng import RngStream
    from se2vae.se2 import lifting_conv, se2_conv
    from se2vae.tensor import Tensor, no_grad

    rng = RngStream(0, stream=1)
    results = {"backend": backend_name(), "cases": {}}

    x = rng.uniform((8, 16, 36, 36), dtype=np.float32)
    results["cases"]["im2col 8x16x36x36 k5"] = _bench(
        kernels.im2col, x, 5, 1, 2, repeats=repeats)

    cols = kernels.im2col(x, 5, 1, 2)
    results["cases"]["col2im 8x16x36x36 k5"] = _bench(
        kernels.col2im, cols, 36, 36, 5, 1, 2, repeats=repeats)

    xp = rng.uniform((8, 64, 36, 36), dtype=np.float32)
    results["cases"]["maxpool 8x64x36x36 2x2"] = _bench(
        kernels.maxpool, xp, 2, 2, 2, 2, 0, 0, repeats=repeats)

    _, idx = kernels.maxpool(xp, 2, 2, 2, 2, 0, 0)
    g = rng.uniform((8, 64, 18, 18), dtype=np.float32)
    results["cases"]["maxpool backward"] = _bench(
        kernels.maxpool_backward, g, idx, 36, 36, 2, 2, 2, 2, 0, 0,
        repeats=repeats)

    with no_grad():
        img = Tensor(rng.uniform((4, 1, 36, 36), dtype=np.float32))
        base = Tensor(rng.uniform((8, 1, 5, 5), dtype=np.float32) - 0.5)
        lifted = lifting_conv(img, base, 8, padding=2)
        kern = Tensor(rng.uniform((16, 8, 8, 5, 5), dtype=np.float32) - 0.5)
        results["cases"]["lifting_conv 36px N=8"] = _bench(
            lambda: lifting_conv(img, base, 8, padding=2), repeats=repeats)
        results["cases"]["se2_conv 36px N=8 8->16ch"] = _bench(
            lambda: se2_conv(lifted, kern, padding=2), repeats=repeats)
    return results


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--json", action="store_true",
                        help="print raw results as JSON (used internally)")
    args = parser.parse_args()

    mine = run_cases(args.repeats)
    if args.json:
        print(json.dumps(mine))
        return 0

    tables = {mine["backend"]: mine["cases"]}
    if mine["backend"] == "cython":
        env = dict(os.environ, SE2VAE_FORCE_PYTHON="1")
        out = subprocess.run(
            [sys.executable, __file__, "--json",
             "--repeats", str(args.repeats)],
            env=env, capture_output=True, text=True, check=True)
        other = json.loads(out.stdout)
        tables[other["backend"]] = other["cases"]
    else:
        print("note: compiled backend unavailable or disabled; "
              "showing the python fallback only\n")

    names = list(mine["cases"])
    width = max(len(n) for n in names)
    header = f"{'case':<{width}}"
    for backend in tables:
        header += f"  {backend + ' (ms)':>14}"
    if len(tables) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name in names:
        line = f"{name:<{width}}"
        for backend in tables:
            line += f"  {tables[backend][name] * 1e3:>14.3f}"
        if len(tables) == 2:
            ratio = tables["python"][name] / tables["cython"][name]
            line += f"  {ratio:>7.2f}x"
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
