"""Compare the compiled and pure-Python stencil backends.

Run with ``python3 benchmarks/bench_stencil.py [--repeat R]``. Reports the best
wall time per call for first and second derivatives on 2-D and 3-D grids,
plus one full Ricci-DeTurck right-hand side, under each backend.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from rflab import grid as gridmod
from rflab.curvature import ricci_deturck_rhs
from rflab.grid import GridSpec, MetricField, d1, d2

CASES = [(2, 64), (2, 256), (3, 16), (3, 32)]


def _metric(grid, seed):
    rng = np.random.default_rng(seed)
    values = np.broadcast_to(np.eye(grid.dim), grid.shape + (grid.dim, grid.dim)).copy()
    noise = 0.01 * rng.standard_normal(values.shape)
    return MetricField(grid, values + 0.5 * (noise + np.swapaxes(noise, -1, -2)))


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat):
    backends = ["python"]
    if gridmod._kernels_ext is not None:
        backends.insert(0, "cython")
    rows = []
    for dim, n in CASES:
        grid = GridSpec.uniform(dim, n)
        f = np.random.default_rng(0).standard_normal(grid.shape)
        g = _metric(grid, 1)
        for name in backends:
            gridmod.set_backend(name)
            rows.append(
                (
                    f"{dim}D N={n}",
                    name,
                    _best(lambda: d1(f, grid, 0), repeat),
                    _best(lambda: d2(f, grid, dim - 1), repeat),
                    _best(lambda: ricci_deturck_rhs(g, g), max(1, repeat // 5)),
                )
            )
    gridmod.set_backend(backends[0])
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    rows = run(args.repeat)
    print(f"{'case':<12}{'backend':<9}{'d1 [ms]':>10}{'d2 [ms]':>10}{'rhs [ms]':>11}")
    for case, name, t1, t2, trhs in rows:
        print(f"{case:<12}{name:<9}{1e3 * t1:>10.3f}{1e3 * t2:>10.3f}{1e3 * trhs:>11.2f}")
    by_case = {}
    for case, name, t1, t2, _ in rows:
        by_case.setdefault(case, {})[name] = t1 + t2
    for case, t in by_case.items():
        if "cython" in t:
            print(f"{case}: compiled stencils {t['python'] / t['cython']:.1f}x faster")


if __name__ == "__main__":
    main()
