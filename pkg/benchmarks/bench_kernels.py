"""Time the numba and numpy paths of the illuminance and binning kernels.

    python benchmarks/bench_kernels.py --clips 200 --repeat 5

Both paths are called directly, so the env flag does not matter here.
"""
import argparse
import time

import numpy as np

from darkadapt import _kernels
from darkadapt.illuminance import LUMA_WEIGHTS, default_bin_edges


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--clips", type=int, default=200)
    p.add_argument("--geometry", default="8,64,64", help="T,H,W")
    p.add_argument("--values", type=int, default=1_000_000)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    T, H, W = (int(v) for v in args.geometry.split(","))
    clips = [rng.integers(0, 256, size=(T, H, W, 3), dtype=np.uint8) for _ in range(args.clips)]
    wr, wg, wb = LUMA_WEIGHTS
    values = rng.uniform(-10, 300, size=args.values)
    edges = default_bin_edges()

    if not _kernels.NUMBA_AVAILABLE:
        print("numba is not importable; only the numpy path can be timed")

    def lum(kernel):
        return lambda: [kernel(c, wr, wg, wb, 1) for c in clips]

    rows = []
    if _kernels.NUMBA_AVAILABLE:
        _kernels._weighted_sum_loop(clips[0], wr, wg, wb, 1)  # compile outside the timing
        _kernels._bin_index_loop(values[:10], edges)
        rows.append(("illuminance", "numba", _best(lum(_kernels._weighted_sum_loop), args.repeat)))
    rows.append(("illuminance", "numpy", _best(lum(_kernels._weighted_sum_numpy), args.repeat)))
    if _kernels.NUMBA_AVAILABLE:
        rows.append(("binning", "numba", _best(lambda: _kernels._bin_index_loop(values, edges), args.repeat)))
    rows.append(("binning", "numpy", _best(lambda: _kernels._bin_index_numpy(values, edges), args.repeat)))

    # the two paths must agree before their timings mean anything
    a = np.concatenate([_kernels._weighted_sum_numpy(c, wr, wg, wb, 1) for c in clips])
    if _kernels.NUMBA_AVAILABLE:
        b = np.concatenate([_kernels._weighted_sum_loop(c, wr, wg, wb, 1) for c in clips])
        print(f"max relative difference (illuminance): {np.max(np.abs(a - b) / np.abs(a).clip(1e-12)):.2e}")
        same = np.array_equal(_kernels._bin_index_loop(values, edges), _kernels._bin_index_numpy(values, edges))
        print(f"binning identical: {same}")

    print(f"{'kernel':<12} {'backend':<8} {'best (s)':>10}")
    for kernel, backend, secs in rows:
        print(f"{kernel:<12} {backend:<8} {secs:>10.4f}")
    print(f"({args.clips} clips of {T}x{H}x{W}, {args.values} values, best of {args.repeat})")


if __name__ == "__main__":
    main()
