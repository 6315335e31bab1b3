import dataclasses
import json

import numpy as np
import pytest

from nlfeti import cli
from nlfeti.cli import (ConfigError, RunConfig, RunReport, emit_report, main,
                        parse_report, run_single, run_strong_scaling,
                        run_weak_scaling_const_delta, run_weak_scaling_const_m)


def _cfg(**kw):
    base = dict(L=8, m=2, p=2, solver="dd", preconditioner="dirichlet",
                tol=1e-8, maxit=2000, mode="manufactured")
    base.update(kw)
    return RunConfig(**base)


@pytest.mark.parametrize("kw", [
    dict(p=3),                       # does not divide L
    dict(p=4),                       # subdomain too thin
    dict(m=0), dict(m=8), dict(L=1),
    dict(solver="gmres"), dict(mode="exact"), dict(backend="mpi"),
    dict(preconditioner="ilu"), dict(tol=0.0), dict(maxit=0),
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        _cfg(**kw).validate()


def test_consistency_mode_recovers_exact_solution():
    r = run_single(_cfg(mode="consistency", tol=1e-10))
    assert r.converged
    u_ref_scale = 1.0
    assert r.error_linf <= 1e-7 * u_ref_scale


def test_single_subdomain_is_direct_solve():
    r = run_single(_cfg(p=1))
    assert r.converged and r.iterations == 0
    assert r.q == 0 and r.n_subdomains == 1
    assert r.primal_residual <= 1e-12


def test_cg_and_dd_agree():
    tol = 1e-8
    r_dd = run_single(_cfg(tol=tol, mode="consistency"))
    r_cg = run_single(_cfg(solver="cg", tol=tol, mode="consistency"))
    assert r_dd.converged and r_cg.converged
    # both recover the same exact discrete solution
    assert r_dd.error_l2 <= 10 * tol
    assert r_cg.error_l2 <= 10 * tol


def test_report_roundtrip():
    r = run_single(_cfg())
    again = RunReport.from_json(r.to_json())
    assert again == r


def test_report_determinism_modulo_timing():
    a = run_single(_cfg(mode="consistency"))
    b = run_single(_cfg(mode="consistency"))

    def scrub(rep):
        d = dataclasses.asdict(rep)
        for key in cli.TIMING_FIELDS:
            d[key] = 0.0
        return json.dumps(d, sort_keys=True)

    assert scrub(a) == scrub(b)
    assert a.kernel_backend in ("compiled", "python")


def test_emit_json_single(tmp_path):
    r = run_single(_cfg())
    path = tmp_path / "report.json"
    emit_report(r, "json", path)
    assert parse_report(path) == r


def test_emit_json_series(tmp_path):
    series = [run_single(_cfg()), run_single(_cfg(p=1))]
    path = tmp_path / "series.json"
    emit_report(series, "json", path)
    assert parse_report(path) == series


def test_emit_csv_schema(tmp_path):
    series = [run_single(_cfg())]
    path = tmp_path / "series.csv"
    emit_report(series, "csv", path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "L,m,p,q,iterations,setup_s,solve_s,primal_residual,error"
    assert len(lines) == 2
    first = lines[1].split(",")
    assert first[:3] == ["8", "2", "2"]


def test_emit_csv_empty_series(tmp_path):
    path = tmp_path / "empty.csv"
    emit_report([], "csv", path)
    assert path.read_text().strip() == \
        "L,m,p,q,iterations,setup_s,solve_s,primal_residual,error"


def test_weak_scaling_const_m_series():
    base = _cfg(tol=1e-5)
    series = run_weak_scaling_const_m(8, 2, [2, 4], base)
    assert [r.config["L"] for r in series] == [8, 16]
    assert [r.config["p"] for r in series] == [2, 4]
    assert all(r.converged for r in series)
    with pytest.raises(ConfigError):
        run_weak_scaling_const_m(9, 2, [2, 3], base)


def test_weak_scaling_const_delta_series():
    base = _cfg(tol=1e-5)
    series = run_weak_scaling_const_delta(0.125, [8, 16], [2, 4], base)
    assert [r.config["m"] for r in series] == [1, 2]  # m doubles with L
    assert all(r.converged for r in series)
    # dd iterations stay non-increasing along the series (small-noise margin)
    assert series[1].iterations <= series[0].iterations + 2
    # first point reproduces a standalone run bit for bit (modulo timing)
    single = run_single(_cfg(L=8, m=1, p=2, tol=1e-5))
    assert series[0].residual_history == single.residual_history
    assert series[0].iterations == single.iterations
    with pytest.raises(ConfigError):
        run_weak_scaling_const_delta(0.3, [8], [2], base)


def test_strong_scaling_series():
    base = _cfg(L=16, m=2, tol=1e-6)
    series = run_strong_scaling(16, 2, [2, 4], base, repeats=3)
    assert len(series) == 2
    for rep in series:
        assert rep.converged
        assert len(rep.solve_seconds_repeats) == 3
        assert rep.solve_seconds in rep.solve_seconds_repeats


def test_consistency_error_bound_across_grid():
    # final linf error stays within 100*tol of the exact discrete solution
    tol = 1e-5
    for L, m, p, solver_name in [(16, 2, 2, "dd"), (24, 3, 3, "dd"),
                                 (48, 4, 4, "dd"), (24, 2, 1, "cg")]:
        rep = run_single(_cfg(L=L, m=m, p=p, solver=solver_name, tol=tol,
                              mode="consistency"))
        assert rep.converged
        assert rep.error_linf <= 100 * tol


def test_dd_iterations_bounded_by_weak_scaling_point():
    # strong-scaling point shares L/p with the matching weak-scaling point
    base = _cfg(tol=1e-5)
    strong = run_strong_scaling(16, 2, [2, 4], base, repeats=1)
    weak = run_weak_scaling_const_m(8, 2, [2, 4], base)
    by_ratio = {r.config["L"] // r.config["p"]: r.iterations for r in weak}
    for rep in strong:
        ratio = rep.config["L"] // rep.config["p"]
        if ratio in by_ratio:
            assert rep.iterations <= by_ratio[ratio] + 2


def test_main_run_and_exit_codes(tmp_path):
    out = tmp_path / "r.json"
    code = main(["run", "--L", "8", "--m", "2", "--p", "2", "--solver", "dd",
                 "--tol", "1e-8", "--out", str(out)])
    assert code == 0
    rep = parse_report(out)
    assert rep.converged

    code = main(["run", "--L", "8", "--m", "2", "--p", "3"])
    assert code == 1  # config error

    code = main(["run", "--L", "16", "--m", "2", "--p", "2",
                 "--maxit", "1", "--tol", "1e-14"])
    assert code == 2  # max iterations


def test_main_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("L = 8\nm = 2\np = 2\nsolver = dd\ntol = 1e-6\n# comment\n")
    out = tmp_path / "r.json"
    code = main(["run", "--config", str(cfg), "--p", "1", "--out", str(out)])
    assert code == 0
    rep = parse_report(out)
    assert rep.config["p"] == 1  # flag overrides the file
    assert rep.config["tol"] == 1e-6


def test_main_series_csv(tmp_path):
    out = tmp_path / "s.csv"
    code = main(["weak-m", "--base-L", "8", "--p-list", "2,4", "--m", "2",
                 "--solver", "dd", "--tol", "1e-5", "--out", str(out)])
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 3


def test_inner_cg_flag(tmp_path):
    out = tmp_path / "r.json"
    code = main(["run", "--L", "8", "--m", "2", "--p", "2",
                 "--precond", "dirichlet-cg", "--inner-cg-iters", "3",
                 "--out", str(out)])
    assert code == 0
    assert parse_report(out).config["preconditioner"] == "dirichlet-cg:3"
