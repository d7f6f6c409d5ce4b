"""Wall-clock comparison of the compiled and pure-Python gridding kernels,
and of the Toeplitz normal operator against explicit grid-regrid.

    python3 benchmarks/bench_gridding.py [--grid 120] [--repeats 5]
"""
import argparse
import time

import numpy as np

from ncssdu import _gridding, acquisition, dcf, nufft, operators


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def gridding_backends(grid, repeats):
    traj = acquisition.default_spiral(grid)
    p = nufft.plan(grid, traj.coords)
    rng = np.random.default_rng(0)
    n_grid = p.oversampled[0] * p.oversampled[1]
    g = rng.standard_normal((8, n_grid)) + 1j * rng.standard_normal((8, n_grid))
    s = rng.standard_normal((8, traj.n_samples)) + 1j * rng.standard_normal((8, traj.n_samples))
    rows = []
    if _gridding.BACKEND == "cython":
        from ncssdu import _gridding_ext as ext
        rows.append(("interp", "cython", best_of(lambda: ext.interp(g, p.idx, p.wts), repeats)))
        rows.append(("spread", "cython", best_of(lambda: ext.spread(s, p.idx, p.wts, n_grid), repeats)))
    rows.append(("interp", "python", best_of(lambda: _gridding.interp_py(g, p.idx, p.wts), repeats)))
    rows.append(("spread", "python", best_of(lambda: _gridding.spread_py(s, p.idx, p.wts, n_grid), repeats)))
    return traj.n_samples, rows


def normal_operator(grid, repeats, coils=8, echoes=3):
    """Seconds per application of E^H W E, Toeplitz vs NUFFT forward+adjoint."""
    traj = acquisition.subsample_arms(acquisition.default_spiral(grid), [0])
    maps = acquisition.simulate_coils(grid, coils)
    w = dcf.pipe_menon(traj.coords, grid)
    op = operators.SenseOperator(nufft.plan(grid, traj.coords), maps, w)
    kern = operators.build_toeplitz_kernel(traj.coords, w, grid)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((echoes,) + grid) + 1j * rng.standard_normal((echoes,) + grid)
    t_toep = best_of(lambda: operators.toeplitz_apply(kern, maps, x), repeats)
    t_comp = best_of(lambda: operators.e_adjoint_weighted(op, operators.e_forward(op, x)), repeats)
    return traj.n_samples, t_toep, t_comp


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--grid", type=int, default=120)
    ap.add_argument("--repeats", type=int, default=5)
    a = ap.parse_args()
    grid = (a.grid, a.grid)
    m, rows = gridding_backends(grid, a.repeats)
    print(f"gridding, {a.grid}x{a.grid}, {m} samples, 8 coils (best of {a.repeats})")
    for op, backend, t in rows:
        print(f"  {op:7s} {backend:7s} {t * 1e3:9.2f} ms")
    m, t_toep, t_comp = normal_operator(grid, a.repeats)
    print(f"normal operator, {a.grid}x{a.grid}, {m} samples, 8 coils x 3 echoes")
    print(f"  toeplitz     {t_toep * 1e3:9.2f} ms")
    print(f"  grid-regrid  {t_comp * 1e3:9.2f} ms  ({t_comp / t_toep:.1f}x slower)")


if __name__ == "__main__":
    main()
