#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure numpy fallback.

Times the three hot kernels (stencil assembly, LDL' factorization,
triangular solves) and an end-to-end substructured solve with each
implementation.  Usage:

    python benchmarks/benchmark_kernels.py [--L 48] [--m 4] [--p 4] [--reps 5]
"""

import argparse
import time

import numpy as np

from nlfeti import grid, kernels, linalg, solver
from nlfeti.assembly import Kernel, assemble_subdomain


def forcing(x, y):
    return np.full_like(np.asarray(x, dtype=float), -4.0)


def boundary_data(x, y):
    return x * x + y * y


def best_of(reps, fn):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench(kern, name, L, m, p, reps):
    lat = grid.build_lattice(L, m)
    ker = Kernel.for_lattice(lat)
    d = grid.partition(lat, p)
    rows = {}

    n_big = max(range(d.n_subdomains),
                key=lambda n: len(d.core_nodes[n]) + len(d.halo_nodes[n]))
    rows["assembly (one subdomain)"] = best_of(
        reps, lambda: assemble_subdomain(d, ker, n_big, forcing,
                                         boundary_data, kern=kern))

    ss = assemble_subdomain(d, ker, n_big, forcing, boundary_data, kern=kern)
    rows["LDL factorization"] = best_of(
        reps, lambda: linalg.PseudoInverseOperator(
            ss.A, None if not ss.floating else np.full(
                ss.s_n, ss.s_n ** -0.5), kern=kern))

    op = linalg.PseudoInverseOperator(
        ss.A, None if not ss.floating else np.full(ss.s_n, ss.s_n ** -0.5),
        kern=kern)
    rhs = np.linspace(-1.0, 1.0, ss.s_n)
    rows["triangular solve (x100)"] = best_of(
        reps, lambda: [op.apply(rhs) for _ in range(100)])

    def end_to_end():
        rs = solver.build_reduced_system(d, ker, forcing, boundary_data,
                                         preconditioner="dirichlet", kern=kern)
        res = solver.projected_pcg(rs, tol=1e-8, maxit=2000)
        assert res.converged
        solver.recover_primal(rs, res.lam)

    rows["end-to-end DD solve"] = best_of(max(1, reps // 2), end_to_end)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--L", type=int, default=48)
    ap.add_argument("--m", type=int, default=4)
    ap.add_argument("--p", type=int, default=4)
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()

    impls = [("python", kernels.get_kernels("python"))]
    try:
        impls.insert(0, ("compiled", kernels.get_kernels("compiled")))
    except ImportError:
        print("compiled core not built; benchmarking the fallback only")

    results = {name: bench(kern, name, args.L, args.m, args.p, args.reps)
               for name, kern in impls}

    print(f"\nkernel benchmark  L={args.L} m={args.m} p={args.p} "
          f"(best of {args.reps})")
    header = f"{'operation':<28}" + "".join(f"{n:>12}" for n, _ in impls)
    if len(impls) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for op in next(iter(results.values())):
        line = f"{op:<28}"
        for name, _ in impls:
            line += f"{results[name][op] * 1e3:>10.2f}ms"
        if len(impls) == 2:
            line += f"{results['python'][op] / results['compiled'][op]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
