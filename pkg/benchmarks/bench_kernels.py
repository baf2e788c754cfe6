"""Compare the compiled meshing kernels with the pure-Python fallback.

Usage::

    python benchmarks/bench_kernels.py [--cells 60] [--sweeps 3] [--repeat 3]

Both backends run the same Gauss-Seidel sweeps on a synthetic curved
orientation field; the script reports best-of-N wall time per backend, the
speed-up, and the largest difference between their results.
"""

import argparse
import time

import numpy as np

from trilattice import _kernels_py
from trilattice.meshing import grid_adjacency

try:
    from trilattice import _kernels
except ImportError:  # pragma: no cover
    _kernels = None


def synthetic_problem(n: int, h: float = 2.0, seed: int = 0):
    rng = np.random.default_rng(seed)
    index = np.arange(n * n).reshape(n, n)
    ptr, idx, _ = grid_adjacency(index)
    jj, ii = np.divmod(np.arange(n * n), n)
    x = np.stack([ii + 0.5, jj + 0.5], axis=1).astype(float)
    phi = np.mod(0.4 * np.sin(x[:, 0] / n * np.pi) + 0.2 * x[:, 1] / n, np.pi / 3)
    o = x + rng.uniform(-h, h, size=x.shape)
    return x, phi, o, ptr.astype(np.int64), idx.astype(np.int64), h


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def run(cells: int, sweeps: int, repeat: int) -> dict:
    x, phi, o, ptr, idx, h = synthetic_problem(cells)
    out = {}
    results = {}
    for name, mod in (("python", _kernels_py), ("cython", _kernels)):
        if mod is None:
            continue

        def positions():
            oo = o.copy()
            mod.position_sweeps(x, phi, oo, ptr, idx, h, sweeps)
            results[name, "pos"] = oo

        def rosy():
            pp = phi.copy()
            mod.rosy_sweeps(pp, phi.copy(), ptr, idx, np.pi / 12, sweeps)
            results[name, "rosy"] = pp

        out[name] = {"position": best_of(positions, repeat), "rosy": best_of(rosy, repeat)}
    if "cython" in out:
        for kind in ("pos", "rosy"):
            out[f"max_diff_{kind}"] = float(np.max(np.abs(results["python", kind] - results["cython", kind])))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--cells", type=int, default=60, help="grid side length")
    ap.add_argument("--sweeps", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    res = run(args.cells, args.sweeps, args.repeat)
    n = args.cells**2
    print(f"{n} samples, {args.sweeps} sweeps, best of {args.repeat}")
    print(f"{'kernel':<10}{'python [s]':>12}{'cython [s]':>12}{'speed-up':>10}")
    for kernel in ("position", "rosy"):
        py = res["python"][kernel]
        if "cython" in res:
            cy = res["cython"][kernel]
            print(f"{kernel:<10}{py:12.4f}{cy:12.4f}{py / cy:10.1f}")
        else:
            print(f"{kernel:<10}{py:12.4f}{'n/a':>12}{'n/a':>10}")
    if "cython" in res:
        print(f"max |python - cython|: positions {res['max_diff_pos']:.3g}, angles {res['max_diff_rosy']:.3g}")


if __name__ == "__main__":
    main()
