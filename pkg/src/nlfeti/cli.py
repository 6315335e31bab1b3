"""Experiment driver: single runs and the scaling protocols at desk scale.

Reproduces the benchmark setting (manufactured solution u = x1^2 + x2^2 with
forcing f = -4 on [0,1]^2) plus a consistency mode whose load is the operator
applied to the nodal manufactured values, making those values the exact
discrete solution.  Reports are machine-readable (JSON per run, CSV per
series) and byte-reproducible except for the timing fields.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from dataclasses import dataclass

import numpy as np

from nlfeti import assembly, grid, kernels, linalg, runtime, solver

MANUFACTURED_FORCING = -4.0


def manufactured_solution(x, y):
    return x * x + y * y


class ConfigError(ValueError):
    """Invalid run configuration (exit code 1)."""


SOLVERS = ("cg", "dd")
MODES = ("manufactured", "consistency")
BACKENDS = ("serial", "threaded")

#: report fields allowed to differ between identically configured runs
TIMING_FIELDS = ("setup_seconds", "solve_seconds", "solve_seconds_repeats")


@dataclass
class RunConfig:
    L: int
    m: int
    p: int = 1
    solver: str = "dd"
    preconditioner: str = "dirichlet"
    tol: float = 1e-5
    maxit: int = 10000
    mode: str = "manufactured"
    backend: str = "serial"
    threads: int = None
    seed: int = 0

    def validate(self):
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        try:
            solver.parse_preconditioner(self.preconditioner)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.tol <= 0 or self.maxit < 1:
            raise ConfigError(f"need tol > 0 and maxit >= 1, got tol={self.tol}, "
                              f"maxit={self.maxit}")
        # Grid preconditions, re-checked before any assembly starts.
        if not (self.L >= 2 and 1 <= self.m < self.L):
            raise ConfigError(f"need L >= 2 and 1 <= m < L, got L={self.L}, m={self.m}")
        if self.solver == "dd":
            if self.p < 1 or self.L % self.p != 0:
                raise ConfigError(f"p={self.p} does not divide L={self.L}")
            if self.L // self.p <= self.m:
                raise ConfigError(f"subdomain width L/p={self.L // self.p} "
                                  f"must exceed m={self.m}")

    def asdict(self):
        return dataclasses.asdict(self)


@dataclass
class RunReport:
    config: dict
    status: str                   # converged | max-iterations | error: ...
    iterations: int
    converged: bool
    residual_history: list        # r'y per iteration (dd) or |r|_2 (cg)
    compat_history: list          # max |G'lambda - g| per iteration (dd only)
    setup_seconds: float
    solve_seconds: float
    primal_residual: float        # |f - A u|_2 / |f|_2 on the glued solution
    error_l2: float               # |u - u_ref|_2 / |u_ref|_2
    error_linf: float             # |u - u_ref|_inf / |u_ref|_inf
    duplicate_discrepancy: float  # dd only, else None
    q: int
    n_subdomains: int
    n_floating: int
    kernel_backend: str
    solve_seconds_repeats: list = None

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def exit_code(self):
        return 0 if self.converged else 2


def _problem_fields(lattice, gs_zero, mode):
    """Per-node forcing values and the reference solution for a mode.

    gs_zero is the system assembled with zero forcing, so its load vector
    carries exactly the Dirichlet contribution.
    """
    u_ref = manufactured_solution(lattice.interior_xy[:, 0],
                                  lattice.interior_xy[:, 1])
    if mode == "manufactured":
        f_vals = np.full(lattice.n_interior, MANUFACTURED_FORCING)
    else:
        # Choose nodal forcing so the assembled load equals A @ u_ref.
        f_vals = (gs_zero.A @ u_ref - gs_zero.f) / lattice.weight
    return f_vals, u_ref


def run_single(config):
    """Execute one solver run and collect its report."""
    config.validate()
    t0 = time.perf_counter()

    lattice = grid.build_lattice(config.L, config.m)
    kernel = assembly.Kernel.for_lattice(lattice)
    g_vals = manufactured_solution(lattice.gamma_xy[:, 0], lattice.gamma_xy[:, 1])
    gs = assembly.assemble_global(lattice, kernel, 0.0, g_vals)
    f_vals, u_ref = _problem_fields(lattice, gs, config.mode)
    f_full = gs.f + lattice.weight * f_vals  # zero-forcing load + source term

    status, iterations, converged = "converged", 0, True
    history, compat, disc = [], [], None
    q, n_sub, n_float = 0, 1, 0
    u = None
    backend = None
    try:
        if config.solver == "cg":
            setup_seconds = time.perf_counter() - t0
            t1 = time.perf_counter()
            u, iterations, history, converged = linalg.cg(
                gs.A.dot, f_full, tol=config.tol, maxit=config.maxit)
            solve_seconds = time.perf_counter() - t1
        else:
            decomp = grid.partition(lattice, config.p)
            backend = runtime.make_backend(config.backend, config.threads)
            rs = solver.build_reduced_system(
                decomp, kernel, f_vals, g_vals,
                preconditioner=config.preconditioner, backend=backend)
            q = rs.q
            n_sub = decomp.n_subdomains
            n_float = int(decomp.floating.sum())
            setup_seconds = time.perf_counter() - t0
            t1 = time.perf_counter()
            res = solver.projected_pcg(rs, tol=config.tol, maxit=config.maxit)
            primal = solver.recover_primal(rs, res.lam)
            solve_seconds = time.perf_counter() - t1
            u = primal.u
            iterations, converged = res.iterations, res.converged
            history, compat = res.rty_history, res.compat_history
            disc = primal.duplicate_discrepancy
        if not converged:
            status = "max-iterations"
    except (solver.PcgBreakdownError, linalg.NotPositiveDefiniteError) as exc:
        status = f"error: {exc}"
        converged = False
        setup_seconds = time.perf_counter() - t0
        solve_seconds = 0.0
    finally:
        if backend is not None:
            backend.close()

    if u is not None:
        fnorm = np.linalg.norm(f_full)
        primal_residual = float(np.linalg.norm(f_full - gs.A @ u) / fnorm)
        error_l2 = float(np.linalg.norm(u - u_ref) / np.linalg.norm(u_ref))
        error_linf = float(np.abs(u - u_ref).max() / np.abs(u_ref).max())
    else:
        primal_residual = error_l2 = error_linf = float("nan")

    return RunReport(
        config=config.asdict(), status=status, iterations=int(iterations),
        converged=bool(converged),
        residual_history=[float(v) for v in history],
        compat_history=[float(v) for v in compat],
        setup_seconds=setup_seconds, solve_seconds=solve_seconds,
        primal_residual=primal_residual, error_l2=error_l2,
        error_linf=error_linf,
        duplicate_discrepancy=None if disc is None else float(disc),
        q=int(q), n_subdomains=int(n_sub), n_floating=int(n_float),
        kernel_backend=kernels.backend_name())


def _with_overrides(base, **kw):
    d = dataclasses.asdict(base)
    d.update(kw)
    return RunConfig(**d)


def run_weak_scaling_const_m(base_L, m, p_list, base_config):
    """Weak scaling at fixed interaction count: L grows proportionally to p."""
    p_list = list(p_list)
    if not p_list:
        return []
    p0 = p_list[0]
    reports = []
    for p in p_list:
        if (base_L * p) % p0 != 0:
            raise ConfigError(f"L = {base_L}*{p}/{p0} is not an integer")
        L = base_L * p // p0
        reports.append(run_single(_with_overrides(base_config, L=L, m=m, p=p)))
    return reports


def run_weak_scaling_const_delta(delta, L_list, p_list, base_config):
    """Weak scaling at fixed horizon: m = delta*L grows with L, p ~ L^2."""
    if len(L_list) != len(p_list):
        raise ConfigError("L-list and p-list must have equal length")
    reports = []
    for L, p in zip(L_list, p_list):
        m = delta * L
        if abs(m - round(m)) > 1e-9:
            raise ConfigError(f"delta*L = {m} is not an integer for L={L}")
        reports.append(run_single(_with_overrides(base_config, L=L,
                                                  m=int(round(m)), p=p)))
    return reports


def run_strong_scaling(L, m, p_list, base_config, repeats=3):
    """Fixed problem, varying subdomain count; solve time is the median of
    `repeats` identical runs (the reported run is the median one)."""
    reports = []
    for p in p_list:
        runs = [run_single(_with_overrides(base_config, L=L, m=m, p=p))
                for _ in range(repeats)]
        times = [r.solve_seconds for r in runs]
        median = sorted(range(len(runs)), key=lambda i: times[i])[len(runs) // 2]
        rep = runs[median]
        rep.solve_seconds_repeats = times
        reports.append(rep)
    return reports


CSV_COLUMNS = ("L", "m", "p", "q", "iterations", "setup_s", "solve_s",
               "primal_residual", "error")


def _csv_row(report):
    cfg = report.config
    return {"L": cfg["L"], "m": cfg["m"], "p": cfg["p"], "q": report.q,
            "iterations": report.iterations,
            "setup_s": repr(report.setup_seconds),
            "solve_s": repr(report.solve_seconds),
            "primal_residual": repr(report.primal_residual),
            "error": repr(report.error_l2)}


def emit_report(report_or_series, fmt, path):
    """Write a report (or series) as JSON or as the fixed-schema CSV table."""
    series = (list(report_or_series)
              if isinstance(report_or_series, (list, tuple)) else None)
    try:
        if fmt == "json":
            if series is None:
                payload = json.loads(report_or_series.to_json())
            else:
                payload = [json.loads(r.to_json()) for r in series]
            with open(path, "w") as fh:
                json.dump(payload, fh, sort_keys=True, indent=2)
                fh.write("\n")
        elif fmt == "csv":
            rows = [report_or_series] if series is None else series
            with open(path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
                writer.writeheader()
                for r in rows:
                    writer.writerow(_csv_row(r))
        else:
            raise ConfigError(f"format must be json or csv, got {fmt!r}")
    except OSError as exc:
        raise IOError(f"cannot write report to {path}: {exc}") from exc


def parse_report(path):
    """Read back a JSON report file (single object or series)."""
    with open(path) as fh:
        payload = json.load(fh)
    if isinstance(payload, list):
        return [RunReport.from_dict(d) for d in payload]
    return RunReport.from_dict(payload)


def _read_config_file(path):
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line (expected key=value): {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = val
    return values


_CONFIG_TYPES = {"L": int, "m": int, "p": int, "tol": float, "maxit": int,
                 "threads": int, "seed": int}


def _build_config(args, require=("L", "m")):
    values = {}
    if args.config:
        raw = _read_config_file(args.config)
        for key, val in raw.items():
            if key not in RunConfig.__dataclass_fields__:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _CONFIG_TYPES.get(key, str)(val)
    for key in RunConfig.__dataclass_fields__:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if args.inner_cg_iters is not None:
        if values.get("preconditioner") in ("dirichlet-cg", None):
            values["preconditioner"] = f"dirichlet-cg:{args.inner_cg_iters}"
    if values.get("preconditioner") == "dirichlet-cg":
        values["preconditioner"] = "dirichlet-cg:5"
    missing = [k for k in require if k not in values]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(missing)}")
    # Series commands override L/m/p per point; placeholders keep the
    # dataclass constructible until then.
    values.setdefault("L", 0)
    values.setdefault("m", 0)
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _add_common_flags(p):
    p.add_argument("--L", type=int, help="particles per direction")
    p.add_argument("--m", type=int, help="interaction radius in cells")
    p.add_argument("--p", type=int, help="subdomains per direction")
    p.add_argument("--solver", choices=SOLVERS)
    p.add_argument("--precond", dest="preconditioner",
                   help="none | dirichlet | dirichlet-cg[:k]")
    p.add_argument("--inner-cg-iters", type=int,
                   help="CG steps of the inexact interior solve (default 5)")
    p.add_argument("--tol", type=float)
    p.add_argument("--maxit", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key=value config file; flags override")
    p.add_argument("--out", help="report output path")
    p.add_argument("--format", choices=("json", "csv"), default=None)


def _parse_int_list(text):
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad integer list {text!r}") from exc


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nlfeti",
        description="Nonlocal Poisson solver benchmarks (single-domain CG "
                    "baseline and FETI-style substructuring)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="single solver run")
    _add_common_flags(run)

    weak_m = sub.add_parser("weak-m", help="weak scaling at constant m")
    _add_common_flags(weak_m)
    weak_m.add_argument("--base-L", type=int, required=True,
                        help="L of the first series point")
    weak_m.add_argument("--p-list", required=True,
                        help="comma-separated p values, L scales with p")

    weak_d = sub.add_parser("weak-delta", help="weak scaling at constant delta")
    _add_common_flags(weak_d)
    weak_d.add_argument("--delta", type=float, required=True)
    weak_d.add_argument("--L-list", required=True)
    weak_d.add_argument("--p-list", required=True)

    strong = sub.add_parser("strong", help="strong scaling over p")
    _add_common_flags(strong)
    strong.add_argument("--p-list", required=True)
    strong.add_argument("--repeats", type=int, default=3)
    return parser


def _summary_line(report):
    cfg = report.config
    return (f"L={cfg['L']} m={cfg['m']} p={cfg['p']} solver={cfg['solver']} "
            f"precond={cfg['preconditioner']} iters={report.iterations} "
            f"status={report.status} setup={report.setup_seconds:.3f}s "
            f"solve={report.solve_seconds:.3f}s "
            f"residual={report.primal_residual:.3e} error={report.error_l2:.3e}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    required = {"run": ("L", "m"), "weak-m": ("m",), "weak-delta": (),
                "strong": ("L", "m")}
    try:
        base = _build_config(args, require=required[args.command])
        if args.command == "run":
            result = run_single(base)
            series = [result]
        elif args.command == "weak-m":
            series = run_weak_scaling_const_m(args.base_L, base.m,
                                              _parse_int_list(args.p_list), base)
            result = series
        elif args.command == "weak-delta":
            series = run_weak_scaling_const_delta(
                args.delta, _parse_int_list(args.L_list),
                _parse_int_list(args.p_list), base)
            result = series
        else:
            series = run_strong_scaling(base.L, base.m,
                                        _parse_int_list(args.p_list), base,
                                        repeats=args.repeats)
            result = series
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    for report in series:
        print(_summary_line(report))
    if args.out:
        fmt = args.format or ("json" if args.command == "run" else "csv")
        emit_report(result, fmt, args.out)
        print(f"wrote {fmt} report to {args.out}")
    return max(r.exit_code() for r in series)


if __name__ == "__main__":
    sys.exit(main())
