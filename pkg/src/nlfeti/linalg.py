"""Sparse symmetric factorization, pseudoinverse action, CG and Schur applies.

Factorizations use an up-looking LDL' kernel (compiled or numpy fallback)
under a reverse Cuthill-McKee ordering.  Singular floating-subdomain
operators are handled through a bordered quasi-definite system
[[A, w], [w', -1]] with w = sqrt(beta) * z, whose leading block solve equals
a solve with the rank-one regularized matrix A + beta z z'; combined with
nullspace projections on both sides this realizes the Moore-Penrose action
while keeping the factorization fully sparse.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from nlfeti import kernels

_PIVOT_RTOL = 1e-13


class NotPositiveDefiniteError(RuntimeError):
    """Factorization hit a non-positive pivot; carries the offending index."""

    def __init__(self, pivot_index, message=None):
        self.pivot_index = int(pivot_index)
        super().__init__(message or f"matrix is not positive definite "
                                    f"(pivot at index {pivot_index})")


def _upper_csc(A):
    U = sp.triu(A.tocsr(), format="csc")
    U.sort_indices()
    return (U.indptr.astype(np.int64), U.indices.astype(np.int64),
            U.data.astype(np.float64))


def _rcm(A):
    return np.asarray(reverse_cuthill_mckee(A.tocsr(), symmetric_mode=True),
                      dtype=np.int64)


class _LdlFactor:
    """LDL' factors of a permuted matrix plus the permutation bookkeeping."""

    def __init__(self, A_perm_upper, perm, kern):
        Ap, Ai, Ax = A_perm_upper
        self.n = len(Ap) - 1
        self.perm = perm
        parent, Lp = kern.ldl_symbolic(self.n, Ap, Ai)
        Li, Lx, D, bad = kern.ldl_numeric(self.n, Ap, Ai, Ax, parent, Lp)
        self.Lp, self.Li, self.Lx, self.D = Lp, Li, Lx, D
        self.bad = bad
        self._kern = kern

    def solve_permuted(self, b):
        return self._kern.ldl_solve(self.n, self.Lp, self.Li, self.Lx, self.D,
                                    np.ascontiguousarray(b, dtype=np.float64))

    def solve(self, b):
        x = self.solve_permuted(b[self.perm])
        out = np.empty_like(x)
        out[self.perm] = x
        return out


class SpdFactorization:
    """Sparse Cholesky-type (LDL') factorization of an SPD matrix."""

    def __init__(self, A, kern=None):
        kern = kern or kernels.active
        A = A.tocsr()
        perm = _rcm(A)
        Ap = A[perm][:, perm]
        self.ldl = _LdlFactor(_upper_csc(Ap), perm, kern)
        scale = float(np.abs(A.diagonal()).max()) if A.shape[0] else 1.0
        if self.ldl.bad >= 0:
            raise NotPositiveDefiniteError(perm[self.ldl.bad])
        small = np.flatnonzero(self.ldl.D <= _PIVOT_RTOL * scale)
        if small.size:
            raise NotPositiveDefiniteError(perm[small[0]])

    @property
    def n(self):
        return self.ldl.n

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        if b.ndim == 1:
            return self.ldl.solve(b)
        out = np.empty_like(b)
        for k in range(b.shape[1]):
            out[:, k] = self.ldl.solve(b[:, k])
        return out


def factorize_spd(A, kern=None):
    """Factor a sparse SPD matrix; raises NotPositiveDefiniteError otherwise."""
    return SpdFactorization(A, kern=kern)


class PseudoInverseOperator:
    """Action of the Moore-Penrose pseudoinverse of a subdomain matrix.

    For a nonsingular matrix (nullspace column z absent or zero) this is a
    plain solve.  For a floating matrix with orthonormal constant nullspace z
    the action is (I - z z') solve(A + beta z z', (I - z z') v) with
    beta = mean(diag A), realized sparsely through the bordered factorization.
    """

    def __init__(self, A, z=None, kern=None):
        kern = kern or kernels.active
        self.n = A.shape[0]
        if z is not None and not np.any(z):
            z = None
        self.z = None if z is None else np.asarray(z, dtype=np.float64)

        if self.z is None:
            self._fact = factorize_spd(A, kern=kern)
            self.ldl = self._fact.ldl
            return

        A = A.tocsr()
        beta = float(A.diagonal().mean())
        self.beta = beta
        w = np.sqrt(beta) * self.z
        B = sp.bmat([[A, sp.csr_matrix(w[:, None])],
                     [sp.csr_matrix(w[None, :]), sp.csr_matrix([[-1.0]])]],
                    format="csr")
        perm_a = _rcm(A)
        # Border pivot second to last: every leading principal block then is a
        # proper submatrix of A (positive definite), the border contributes the
        # single admissible negative pivot, and the final pivot is positive.
        perm = np.concatenate([perm_a[:-1], [self.n], perm_a[-1:]])
        Bp = B[perm][:, perm]
        self.ldl = self._fact = _LdlFactor(_upper_csc(Bp), perm, kern)
        if self._fact.bad >= 0:
            raise NotPositiveDefiniteError(perm[self._fact.bad],
                                           "bordered factorization broke down")
        scale = float(np.abs(A.diagonal()).max())
        D = self._fact.D
        border_pos = self.n - 1
        ok = D > _PIVOT_RTOL * scale
        ok[border_pos] = D[border_pos] < 0.0
        if not ok.all():
            raise NotPositiveDefiniteError(perm[int(np.flatnonzero(~ok)[0])],
                                           "unexpected pivot sign in bordered system")

    def _project(self, v):
        return v - self.z * (self.z @ v)

    def apply(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.z is None:
            return self._fact.solve(v)
        rhs = np.zeros(self.n + 1)
        rhs[:self.n] = self._project(v)
        y = self._fact.solve(rhs)[:self.n]
        return self._project(y)


def pseudo_apply(op, v):
    """Apply a PseudoInverseOperator to a vector."""
    return op.apply(v)


def cg(apply_a, b, tol=1e-5, maxit=10000):
    """Unpreconditioned conjugate gradients with relative residual stopping.

    Returns (x, iterations, residual_history, converged); on hitting maxit
    the best iterate comes back with converged=False.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return x, 0, [0.0], True
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    history = [np.sqrt(rr)]
    for it in range(1, maxit + 1):
        ap = apply_a(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            return x, it - 1, history, False
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = float(r @ r)
        history.append(np.sqrt(rr_new))
        if np.sqrt(rr_new) <= tol * bnorm:
            return x, it, history, True
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, maxit, history, False


def cg_fixed(apply_a, b, iterations):
    """Exactly `iterations` CG steps from a zero start (no tolerance test).

    Used as the inexact interior solve inside the Dirichlet preconditioner;
    the step count is fixed so repeated applies perform the same operations.
    """
    x = np.zeros_like(b)
    r = b.astype(np.float64, copy=True)
    rr = float(r @ r)
    if rr == 0.0:
        return x
    p = r.copy()
    for _ in range(iterations):
        ap = apply_a(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            break
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = float(r @ r)
        if rr_new == 0.0:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


class SchurOperator:
    """Interface (halo) Schur complement action S = A_hh - A_hc A_cc^-1 A_ch.

    The interior solve is either the exact factorization of A_cc or a fixed
    number of CG iterations on it (then no second factorization is stored).
    """

    def __init__(self, A_cc, A_ch, A_hc, A_hh, interior="exact", kern=None):
        self.A_ch = A_ch.tocsr()
        self.A_hc = A_hc.tocsr()
        self.A_hh = A_hh.tocsr()
        self._A_cc = A_cc.tocsr()
        if interior == "exact":
            self._interior_fact = factorize_spd(A_cc, kern=kern)
            self._cg_iters = None
        else:
            kind, iters = interior
            if kind != "cg" or iters < 1:
                raise ValueError(f"interior solver must be 'exact' or ('cg', k); "
                                 f"got {interior!r}")
            self._interior_fact = None
            self._cg_iters = int(iters)

    def _interior_solve(self, b):
        if self._interior_fact is not None:
            return self._interior_fact.solve(b)
        return cg_fixed(self._A_cc.dot, b, self._cg_iters)

    def apply(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self._A_cc.shape[0] == 0:
            return self.A_hh @ v
        return self.A_hh @ v - self.A_hc @ self._interior_solve(self.A_ch @ v)


def schur_apply(op, v):
    """Apply a SchurOperator to a halo-sized vector."""
    return op.apply(v)
