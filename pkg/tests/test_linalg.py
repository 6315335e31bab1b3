import numpy as np
import pytest
import scipy.sparse as sp

from nlfeti import linalg
from nlfeti.assembly import assemble_subdomain, nullspace_basis
from nlfeti.linalg import (NotPositiveDefiniteError, PseudoInverseOperator,
                           SchurOperator, cg, cg_fixed, factorize_spd,
                           pseudo_apply, schur_apply)
from conftest import boundary_data, forcing, make_problem


def _random_spd(n, rng, density=0.05):
    A = sp.random(n, n, density=density, random_state=rng, format="csr")
    A = A + A.T
    A = A + sp.diags(np.abs(A).sum(axis=1).A1 + 1.0)
    return A.tocsr()


def test_identity_factorization():
    I = sp.identity(5, format="csr")
    F = factorize_spd(I)
    b = np.arange(5.0)
    assert np.array_equal(F.solve(b), b)


def test_solve_matches_dense():
    _, _, gs, _ = make_problem(4, 1)
    F = factorize_spd(gs.A)
    x = F.solve(gs.f)
    xd = np.linalg.solve(gs.A.toarray(), gs.f)
    assert np.linalg.norm(x - xd) <= 1e-10 * np.linalg.norm(xd)


def test_solve_multiply_roundtrip(rng):
    for n in (20, 117, 500):
        A = _random_spd(n, rng)
        F = factorize_spd(A)
        x = rng.randn(n)
        err = np.linalg.norm(F.solve(A @ x) - x) / np.linalg.norm(x)
        assert err <= 1e-12


def test_multiple_rhs(rng):
    A = _random_spd(40, rng)
    F = factorize_spd(A)
    B = rng.randn(40, 3)
    X = F.solve(B)
    assert np.allclose(A @ X, B, rtol=1e-10, atol=1e-12)


def test_floating_matrix_rejected():
    _, ker, _, d = make_problem(12, 2, 3)
    ss = assemble_subdomain(d, ker, 4, forcing, boundary_data)
    with pytest.raises(NotPositiveDefiniteError) as info:
        factorize_spd(ss.A)
    assert 0 <= info.value.pivot_index < ss.s_n


def test_indefinite_matrix_rejected():
    A = sp.diags([1.0, -2.0, 3.0]).tocsr()
    with pytest.raises(NotPositiveDefiniteError):
        factorize_spd(A)


def _floating_subsystem():
    _, ker, _, d = make_problem(12, 2, 3)
    ss = assemble_subdomain(d, ker, 4, forcing, boundary_data)
    return ss, nullspace_basis(ss)


def test_pseudo_nonfloating_is_plain_solve(rng):
    _, ker, _, d = make_problem(8, 2, 2)
    ss = assemble_subdomain(d, ker, 0, forcing, boundary_data)
    op = PseudoInverseOperator(ss.A)
    F = factorize_spd(ss.A)
    v = rng.randn(ss.s_n)
    assert np.array_equal(pseudo_apply(op, v), F.solve(v))
    # an all-zero nullspace column is treated the same way
    op0 = PseudoInverseOperator(ss.A, np.zeros(ss.s_n))
    assert np.array_equal(op0.apply(v), F.solve(v))


def test_pseudo_floating_roundtrip(rng):
    ss, z = _floating_subsystem()
    op = PseudoInverseOperator(ss.A, z)
    x = rng.randn(ss.s_n)
    x -= z * (z @ x)
    y = op.apply(ss.A @ x)
    assert np.linalg.norm(y - x) <= 1e-10 * np.linalg.norm(x)
    assert abs(z @ y) <= 1e-10 * np.linalg.norm(y)
    # nullspace input is annihilated
    assert np.linalg.norm(op.apply(z)) <= 1e-14


def test_pseudo_action_properties(rng):
    ss, z = _floating_subsystem()
    op = PseudoInverseOperator(ss.A, z)
    for _ in range(5):
        v = rng.randn(ss.s_n)
        v -= z * (z @ v)
        y = op.apply(v)
        assert np.abs(ss.A @ y - v).max() <= 1e-10 * np.abs(v).max()
        assert abs(z @ y) <= 1e-10 * np.linalg.norm(y)
    u, v = rng.randn(ss.s_n), rng.randn(ss.s_n)
    lhs, rhs = u @ op.apply(v), v @ op.apply(u)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_cg_zero_rhs():
    A = sp.identity(4, format="csr")
    x, iters, hist, conv = cg(A.dot, np.zeros(4))
    assert iters == 0 and conv and not x.any()


def test_cg_matches_direct():
    _, _, gs, _ = make_problem(4, 1)
    x, _, _, conv = cg(gs.A.dot, gs.f, tol=1e-10, maxit=1000)
    xd = np.linalg.solve(gs.A.toarray(), gs.f)
    assert conv
    assert np.linalg.norm(x - xd) <= 1e-8 * np.linalg.norm(xd)


def test_cg_finite_termination_on_diagonal(rng):
    # CG converges in at most (#distinct eigenvalues) iterations
    d = np.array([1.0, 1.0, 3.0, 3.0, 7.0, 7.0, 7.0])
    A = sp.diags(d).tocsr()
    b = rng.randn(7)
    _, iters, _, conv = cg(A.dot, b, tol=1e-12, maxit=50)
    assert conv and iters <= 3 + 1


def test_cg_maxit_flag():
    _, _, gs, _ = make_problem(8, 2)
    x, iters, hist, conv = cg(gs.A.dot, gs.f, tol=1e-14, maxit=2)
    assert not conv and iters == 2 and len(hist) == 3


def test_cg_energy_error_monotone(rng):
    # energy-norm optimality: error at 2k never exceeds error at k
    A = _random_spd(60, rng)
    b = rng.randn(60)
    xd = np.linalg.solve(A.toarray(), b)

    def energy_err(k):
        x, _, _, _ = cg(A.dot, b, tol=0.0, maxit=k)
        e = x - xd
        return np.sqrt(e @ (A @ e))

    for k in (1, 2, 4, 8, 16):
        assert energy_err(2 * k) <= energy_err(k) * (1 + 1e-12)


def test_cg_fixed_iterations(rng):
    A = _random_spd(30, rng)
    b = rng.randn(30)
    x5 = cg_fixed(A.dot, b, 5)
    x5b = cg_fixed(A.dot, b, 5)
    assert np.array_equal(x5, x5b)
    assert not cg_fixed(A.dot, np.zeros(30), 5).any()
    # more steps get closer to the solution
    xd = np.linalg.solve(A.toarray(), b)
    errs = [np.linalg.norm(cg_fixed(A.dot, b, k) - xd) for k in (2, 8, 25)]
    assert errs[0] > errs[1] > errs[2]


def _schur_setup(n=0, interior="exact"):
    _, ker, _, d = make_problem(8, 2, 2)
    ss = assemble_subdomain(d, ker, n, forcing, boundary_data)
    A_cc, A_ch, A_hc, A_hh = ss.blocks()
    op = SchurOperator(A_cc, A_ch, A_hc, A_hh, interior=interior)
    A = ss.A.toarray()
    nc = ss.n_core
    S = A[nc:, nc:] - A[nc:, :nc] @ np.linalg.solve(A[:nc, :nc], A[:nc, nc:])
    return op, S


def test_schur_matches_dense(rng):
    op, S = _schur_setup()
    for _ in range(5):
        v = rng.randn(S.shape[0])
        ref = S @ v
        assert np.linalg.norm(op.apply(v) - ref) <= 1e-10 * np.linalg.norm(ref)
    assert not op.apply(np.zeros(S.shape[0])).any()


def test_schur_cg_budget_converges_to_exact(rng):
    _, S = _schur_setup()
    v = rng.randn(S.shape[0])
    ref = S @ v
    errs = []
    for k in (5, 50, 500):
        op_k, _ = _schur_setup(interior=("cg", k))
        errs.append(np.linalg.norm(op_k.apply(v) - ref))
    assert errs[0] >= errs[1] >= errs[2]
    assert errs[2] <= 1e-10 * np.linalg.norm(ref)


def test_schur_spsd(rng):
    # nonfloating: positive definite on halo vectors
    op, S = _schur_setup(n=0)
    assert np.linalg.eigvalsh(S).min() > 0
    # floating: semidefinite to round-off
    _, ker, _, d = make_problem(12, 2, 3)
    ss = assemble_subdomain(d, ker, 4, forcing, boundary_data)
    op = SchurOperator(*ss.blocks(), interior="exact")
    for _ in range(10):
        v = rng.randn(len(ss.halo_nodes))
        assert v @ schur_apply(op, v) >= -1e-10 * (v @ v)


def test_schur_interior_config_rejected():
    _, ker, _, d = make_problem(8, 2, 2)
    ss = assemble_subdomain(d, ker, 0, forcing, boundary_data)
    with pytest.raises(ValueError):
        SchurOperator(*ss.blocks(), interior=("cg", 0))
