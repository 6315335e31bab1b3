"""Reduced Lagrange-multiplier system and the distributed projected PCG.

The dual operator K = M pinv(A_eps) M' is never formed; each worker applies
its local part followed by a halo exchange.  The coarse projection keeps
iterates compatible (G' lambda = g) and the optional Dirichlet preconditioner
applies halo-restricted Schur complements.  A distributed dual vector is a
list with one numpy array per worker; shared entries of a consistent vector
are equal at both owners.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from nlfeti import assembly, kernels, linalg, runtime


class PcgBreakdownError(RuntimeError):
    """p'Kp turned negative beyond round-off: operator or assembly defect."""


_BREAKDOWN_RTOL = 1e-14


def parse_preconditioner(spec):
    """Normalize a preconditioner spec to ("none",), ("dirichlet", "exact"),
    or ("dirichlet", k) for the k-step inner-CG variant."""
    if isinstance(spec, tuple):
        return spec
    if spec in (None, "none"):
        return ("none",)
    if spec == "dirichlet":
        return ("dirichlet", "exact")
    if spec.startswith("dirichlet-cg:"):
        k = int(spec.split(":", 1)[1])
        if k < 1:
            raise ValueError(f"inner CG iteration count must be >= 1, got {k}")
        return ("dirichlet", k)
    raise ValueError(f"unknown preconditioner {spec!r}")


def _csr_arrays(A):
    A = A.tocsr()
    A.sort_indices()
    return (A.indptr.astype(np.int64), A.indices.astype(np.int64),
            np.ascontiguousarray(A.data, dtype=np.float64))


_EMPTY_I = np.empty(0, dtype=np.int64)
_EMPTY_F = np.empty(0)


class _FusedOps:
    """Single-call compiled apply kernels for one worker.

    Bundles the signed selections, factors and scratch buffers so the whole
    K_n and Q_n applies run inside one GIL-released kernel call; this is what
    lets the threaded backend scale.
    """

    def __init__(self, subsys, pseudo, schur, kern):
        self._kern = kern
        self.dual_local = np.ascontiguousarray(subsys.dual_local, dtype=np.int64)
        self.dual_halo = np.ascontiguousarray(subsys.dual_halo, dtype=np.int64)
        self.dual_signs = np.ascontiguousarray(subsys.dual_signs)
        self.s_n = subsys.s_n
        self.z = pseudo.z if pseudo.z is not None else _EMPTY_F
        ldl = pseudo.ldl
        self.kperm = np.ascontiguousarray(ldl.perm, dtype=np.int64)
        self.kfactor = (ldl.Lp.astype(np.int64), ldl.Li.astype(np.int64),
                        np.ascontiguousarray(ldl.Lx),
                        np.ascontiguousarray(ldl.D))
        self.xbuf = np.empty(self.s_n)
        self.pbuf = np.empty(len(self.kperm))

        self.schur = None
        if schur is not None:
            nh = self.s_n - subsys.n_core
            nc = subsys.n_core
            hh = _csr_arrays(schur.A_hh)
            hc = _csr_arrays(schur.A_hc)
            ch = _csr_arrays(schur.A_ch)
            if schur._interior_fact is not None:
                cg_iters = 0
                cc = (_EMPTY_I, _EMPTY_I, _EMPTY_F)
                f = schur._interior_fact.ldl
                iperm = np.ascontiguousarray(f.perm, dtype=np.int64)
                ifac = (f.Lp.astype(np.int64), f.Li.astype(np.int64),
                        np.ascontiguousarray(f.Lx), np.ascontiguousarray(f.D))
            else:
                cg_iters = schur._cg_iters
                cc = _csr_arrays(schur._A_cc)
                iperm = _EMPTY_I
                ifac = (_EMPTY_I, _EMPTY_I, _EMPTY_F, _EMPTY_F)
            self.schur = (nh, nc, hh, hc, ch, cg_iters, cc, iperm, ifac,
                          np.empty(nh), np.empty(nh), np.empty(nc),
                          np.empty(nc), np.empty(nc), np.empty(nc),
                          np.empty(nc))

    def k_apply(self, lam):
        return self._kern.k_apply_fused(
            np.ascontiguousarray(lam), self.dual_local, self.dual_signs,
            self.s_n, self.z, self.kperm, *self.kfactor,
            self.xbuf, self.pbuf)

    def q_apply(self, resid):
        (nh, nc, hh, hc, ch, cg_iters, cc, iperm, ifac,
         vh, yh, tc, xc, rc, pc, apc) = self.schur
        return self._kern.q_apply_fused(
            np.ascontiguousarray(resid), self.dual_halo, self.dual_signs,
            nh, nc, *hh, *hc, *ch, cg_iters, *cc, iperm, *ifac,
            vh, yh, tc, xc, rc, pc, apc)


@dataclass
class WorkerState:
    """Everything one worker owns: local system, factorizations, coarse rows."""

    subsys: assembly.SubdomainSystem
    pseudo: linalg.PseudoInverseOperator
    schur: linalg.SchurOperator
    z_col: np.ndarray
    Gn: np.ndarray                # local column of G on this worker's duals
    fused: _FusedOps = None       # compiled fast path, when available
    G_tilde: np.ndarray = None    # (q_n, z) rows of G
    e: np.ndarray = None          # exchanged dual right-hand side


@dataclass
class ReducedSystem:
    decomp: object
    topology: runtime.Topology
    backend: object
    workers: list
    coarse: assembly.CoarseSystem
    preconditioner: tuple
    lam0: list = field(default=None, repr=False)

    @property
    def q(self):
        return self.decomp.constraints.q


def build_reduced_system(decomp, kernel, f_source, g_data,
                         preconditioner="dirichlet", backend=None, kern=None):
    """Assemble and factor all per-subdomain systems plus the coarse problem."""
    precond = parse_preconditioner(preconditioner)
    backend = backend or runtime.SerialBackend()
    topology = runtime.build_topology(decomp)

    kern_eff = kern or kernels.active
    use_fused = hasattr(kern_eff, "k_apply_fused")

    def build_worker(n, _):
        subsys = assembly.assemble_subdomain(decomp, kernel, n, f_source,
                                             g_data, kern=kern)
        z_col = assembly.nullspace_basis(subsys)
        pseudo = linalg.PseudoInverseOperator(
            subsys.A, z_col if subsys.floating else None, kern=kern)
        schur = None
        if precond[0] == "dirichlet":
            A_cc, A_ch, A_hc, A_hh = subsys.blocks()
            interior = "exact" if precond[1] == "exact" else ("cg", precond[1])
            schur = linalg.SchurOperator(A_cc, A_ch, A_hc, A_hh,
                                         interior=interior, kern=kern)
        fused = (_FusedOps(subsys, pseudo, schur, kern_eff)
                 if use_fused else None)
        return WorkerState(subsys=subsys, pseudo=pseudo, schur=schur,
                           z_col=z_col, Gn=subsys.apply_M(z_col), fused=fused)

    workers = backend.run(build_worker, range(decomp.n_subdomains))
    coarse = assembly.assemble_coarse([w.subsys for w in workers],
                                      topology, backend)
    for w, G_tilde in zip(workers, coarse.G_local):
        w.G_tilde = G_tilde

    e_local = backend.run(
        lambda n, w: w.subsys.apply_M(w.pseudo.apply(w.subsys.f)), workers)
    for w, e_n in zip(workers, runtime.halo_exchange(topology, e_local)):
        w.e = e_n

    rs = ReducedSystem(decomp=decomp, topology=topology, backend=backend,
                       workers=workers, coarse=coarse, preconditioner=precond)
    rs.lam0 = initial_guess(rs)
    return rs


def initial_guess(rs):
    """lambda_0 = G_tilde (G'G)^+ g, which satisfies G' lambda_0 = g."""
    c = rs.coarse.gtg_pinv @ rs.coarse.g
    return [w.G_tilde @ c for w in rs.workers]


def apply_K(rs, lam):
    """Distributed K apply: local M pinv(A) M' then a neighbor halo exchange."""
    def local(n, w):
        if w.fused is not None:
            return w.fused.k_apply(lam[n])
        return w.subsys.apply_M(w.pseudo.apply(w.subsys.apply_MT(lam[n])))

    x = rs.backend.run(local, rs.workers)
    return runtime.halo_exchange(rs.topology, x)


def _coarse_dot(rs, v):
    """Replicated G'v from per-worker local products (one coarse reduction).

    The per-worker contribution is a cheap O(q_n) dot, so it runs inline on
    the orchestrating side; only the heavy subdomain solves go through the
    execution backend.
    """
    def contrib(n, w):
        out = np.zeros(rs.coarse.z)
        out[n] = w.Gn @ v[n]
        return out
    return runtime.coarse_reduce(
        rs.topology, [contrib(n, w) for n, w in enumerate(rs.workers)])


def apply_P0(rs, v):
    """Projection P0 = I - G (G'G)^+ G' using precomputed G rows."""
    gv = _coarse_dot(rs, v)
    c = rs.coarse.gtg_pinv @ gv
    return [v_n - w.G_tilde @ c for v_n, w in zip(v, rs.workers)]


def apply_preconditioner(rs, r):
    """Variant "none" copies r; Dirichlet applies halo Schur complements
    through the halo block of M, followed by a halo exchange."""
    if rs.preconditioner[0] == "none":
        return [r_n.copy() for r_n in r]

    def local(n, w):
        if w.fused is not None:
            return w.fused.q_apply(r[n])
        return w.subsys.apply_M_halo(w.schur.apply(w.subsys.apply_MT_halo(r[n])))

    z = rs.backend.run(local, rs.workers)
    return runtime.halo_exchange(rs.topology, z)


def _dot_dual(rs, a, b):
    """Stacked dual inner product (shared entries counted at both owners).

    The doubling relative to the q-dimensional inner product cancels in every
    CG ratio and in the relative stopping rule.
    """
    return runtime.scalar_allreduce(
        rs.topology, [float(a_n @ b_n) for a_n, b_n in zip(a, b)])


@dataclass
class PcgResult:
    lam: list
    iterations: int
    converged: bool
    rty_history: list
    compat_history: list          # max |G' lambda - g| after each iteration
    lam_history: list = None
    stop_reason: str = "converged"


def projected_pcg(rs, tol=1e-5, maxit=10000, record_lambda=False):
    """Projected preconditioned CG on the dual system.

    Iterates keep G' lambda = g by construction (compatible start, projected
    directions); stops once r'y drops below tol^2 times its initial value.
    On reaching maxit the best iterate is returned with converged=False.
    """
    lam = [l.copy() for l in rs.lam0]
    compat0 = _compat_error(rs, lam)
    if rs.q == 0:
        return PcgResult(lam=lam, iterations=0, converged=True,
                         rty_history=[0.0], compat_history=[compat0],
                         lam_history=[_copy_lam(lam)] if record_lambda else None)

    x = apply_K(rs, lam)
    r = apply_P0(rs, [w.e - x_n for w, x_n in zip(rs.workers, x)])
    y = apply_P0(rs, apply_preconditioner(rs, r))
    p = [y_n.copy() for y_n in y]
    alpha = _dot_dual(rs, r, y)
    rty0 = alpha
    history = [alpha]
    compat = [compat0]
    lam_hist = [_copy_lam(lam)] if record_lambda else None

    if rty0 <= 0.0:
        return PcgResult(lam=lam, iterations=0, converged=True,
                         rty_history=history, compat_history=compat,
                         lam_history=lam_hist)

    k_est = 0.0
    for it in range(1, maxit + 1):
        x = apply_P0(rs, apply_K(rs, p))
        beta = _dot_dual(rs, p, x)
        pp = _dot_dual(rs, p, p)
        if pp > 0.0:
            k_est = max(k_est, abs(beta) / pp)
        if beta <= 0.0:
            if beta < -_BREAKDOWN_RTOL * pp * max(k_est, 1.0):
                raise PcgBreakdownError(
                    f"p'Kp = {beta} at iteration {it} is negative beyond round-off")
            return PcgResult(lam=lam, iterations=it - 1, converged=False,
                             rty_history=history, compat_history=compat,
                             lam_history=lam_hist, stop_reason="stagnation")
        step = alpha / beta
        lam = [l + step * p_n for l, p_n in zip(lam, p)]
        r = [r_n - step * x_n for r_n, x_n in zip(r, x)]
        y = apply_P0(rs, apply_preconditioner(rs, r))
        alpha_new = _dot_dual(rs, r, y)
        history.append(alpha_new)
        compat.append(_compat_error(rs, lam))
        if record_lambda:
            lam_hist.append(_copy_lam(lam))
        if alpha_new <= tol * tol * rty0:
            return PcgResult(lam=lam, iterations=it, converged=True,
                             rty_history=history, compat_history=compat,
                             lam_history=lam_hist)
        p = [y_n + (alpha_new / alpha) * p_n for y_n, p_n in zip(y, p)]
        alpha = alpha_new

    return PcgResult(lam=lam, iterations=maxit, converged=False,
                     rty_history=history, compat_history=compat,
                     lam_history=lam_hist, stop_reason="max-iterations")


def _copy_lam(lam):
    return [l.copy() for l in lam]


def _compat_error(rs, lam):
    """max |G' lambda - g| over coarse components."""
    diff = _coarse_dot(rs, lam) - rs.coarse.g
    return float(np.abs(diff).max(initial=0.0))


@dataclass
class PrimalSolution:
    u: np.ndarray                 # glued vector on all interior nodes
    u_subdomains: list
    duplicate_discrepancy: float


def recover_primal(rs, lam):
    """Back-substitute u_n = pinv(A_n)(f_n - M_n' lambda_n) + Z_n alpha_n and
    glue by block ownership; alpha solves the coarse compatibility system."""
    x = apply_K(rs, lam)
    t = _coarse_dot(rs, [x_n - w.e for w, x_n in zip(rs.workers, x)])
    alpha = rs.coarse.gtg_pinv @ t

    def back_substitute(n, w):
        rhs = w.subsys.f - w.subsys.apply_MT(lam[n])
        return w.pseudo.apply(rhs) + w.z_col * alpha[n]

    u_subs = rs.backend.run(back_substitute, rs.workers)

    lattice = rs.decomp.lattice
    u = np.empty(lattice.n_interior)
    for n, w in enumerate(rs.workers):
        owned = rs.decomp.block_rects[n].node_indices(lattice.L)
        u[owned] = u_subs[n][w.subsys.local_of_global[owned]]

    disc = 0.0
    vals = [u_n[w.subsys.dual_local] for u_n, w in zip(u_subs, rs.workers)]
    for a, sl_a, b, sl_b in rs.topology.exchanges:
        if sl_a.stop > sl_a.start:
            disc = max(disc, float(np.abs(vals[a][sl_a] - vals[b][sl_b]).max()))
    return PrimalSolution(u=u, u_subdomains=u_subs, duplicate_discrepancy=disc)


def dual_to_global(rs, v):
    """Collapse a consistent distributed dual vector to its global form."""
    out = np.zeros(rs.q)
    for n, w in enumerate(rs.workers):
        out[w.subsys.dual_gids] = v[n]
    return out


def global_to_dual(rs, vec):
    """Scatter a global dual vector to per-worker slices."""
    return [np.asarray(vec, dtype=np.float64)[w.subsys.dual_gids]
            for w in rs.workers]
