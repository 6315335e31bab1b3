"""Nonlocal kernel evaluation and stiffness/load assembly.

Assembles the single-domain system, the per-subdomain systems with
overlap-multiplicity weights, signed constraint selections, nullspace
columns, and the replicated coarse matrices.  All pair interactions are
gated by the l-infinity horizon on integer grid offsets, and kernel values
are taken from a per-offset table so that equal offsets yield bitwise equal
matrix entries everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from nlfeti import kernels, runtime
from nlfeti.kernels.fallback import _popcount64

#: integral of the Euclidean norm over [-1,1]^2: (4/3) (sqrt(2) + asinh(1))
K_INF = (4.0 / 3.0) * (math.sqrt(2.0) + math.log(1.0 + math.sqrt(2.0)))


def scaling_constant(delta):
    """Kernel constant C = 2 / (delta^3 K) normalizing the operator.

    K is the integral of |w| over [-1,1]^2; with this choice the continuum
    nonlocal Laplacian of x1^2 + x2^2 equals exactly 4, matching the
    manufactured forcing f = -4.
    """
    if delta <= 0:
        raise ValueError(f"horizon must be positive, got {delta}")
    return 2.0 / (delta ** 3 * K_INF)


@dataclass(frozen=True)
class Kernel:
    """Radial kernel gamma(x, y) = C / |x - y|_2 supported on the l-inf ball."""

    delta: float
    C: float

    @classmethod
    def for_lattice(cls, lattice):
        delta = lattice.delta
        return cls(delta=delta, C=scaling_constant(delta))

    def value(self, r):
        """Kernel value at Euclidean distance r > 0."""
        return self.C / r

    def stencil_table(self, m, h):
        """gamma * omega_i * omega_j per integer offset, zero at the center."""
        side = 2 * m + 1
        tab = np.zeros(side * side)
        for di in range(-m, m + 1):
            for dj in range(-m, m + 1):
                r2 = di * di + dj * dj
                if r2 > 0:
                    tab[(di + m) * side + (dj + m)] = \
                        self.C * h * h * h / math.sqrt(r2)
        return tab


def _field_values(fld, xy):
    """Evaluate a scalar field given as a callable, scalar, or value array."""
    if callable(fld):
        return np.asarray(fld(xy[:, 0], xy[:, 1]), dtype=np.float64)
    arr = np.asarray(fld, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(len(xy), float(arr))
    if len(arr) != len(xy):
        raise ValueError(f"field array has {len(arr)} values for {len(xy)} nodes")
    return arr


def _finalize_csr(s, oi, oj, ov, diag):
    rows = np.concatenate([oi, np.arange(s, dtype=np.int64)])
    cols = np.concatenate([oj, np.arange(s, dtype=np.int64)])
    vals = np.concatenate([ov, diag])
    A = sp.coo_matrix((vals, (rows, cols)), shape=(s, s)).tocsr()
    A.sort_indices()
    return A


@dataclass
class GlobalSystem:
    """Single-domain stiffness matrix and load with Dirichlet data folded in."""

    lattice: object
    A: sp.csr_matrix
    f: np.ndarray
    u_exact: np.ndarray = None


def assemble_global(lattice, kernel, f_source, g_data, kern=None):
    """Assemble the single-domain system A u = f on the interior nodes."""
    if kernel.delta != lattice.delta:
        raise ValueError(f"kernel horizon {kernel.delta} does not match "
                         f"lattice horizon {lattice.delta}")
    kern = kern or kernels.active
    L, m, E = lattice.L, lattice.m, lattice.ext_side
    s = lattice.n_interior

    col_of_ext = np.full(E * E, -1, dtype=np.int64)
    col_of_ext[lattice.ext_flat(lattice.interior_ij)] = np.arange(s)
    gmask = np.zeros(E * E, dtype=np.uint8)
    gval = np.zeros(E * E)
    gext = lattice.ext_flat(lattice.gamma_ij)
    gmask[gext] = 1
    gval[gext] = _field_values(g_data, lattice.gamma_xy)

    oi, oj, ov, diag, fvec = kern.assemble_operator(
        np.ascontiguousarray(lattice.ext_flat(lattice.interior_ij)),
        np.ascontiguousarray(_field_values(f_source, lattice.interior_xy)),
        np.ones(s), col_of_ext, gmask, gval, None,
        E, m, kernel.stencil_table(m, lattice.h), lattice.weight)
    return GlobalSystem(lattice=lattice, A=_finalize_csr(s, oi, oj, ov, diag),
                        f=fvec)


@dataclass
class SubdomainSystem:
    """Local system of one subdomain, core nodes first then halo nodes.

    Dual (constraint) rows are ordered by global dual index; dual_local maps
    each row to the constrained node's local index and dual_halo to its index
    inside the halo block (-1 when the node sits in the core, which happens
    for odd horizons only).
    """

    n: int
    core_nodes: np.ndarray
    halo_nodes: np.ndarray
    A: sp.csr_matrix
    f: np.ndarray
    floating: bool
    dual_gids: np.ndarray
    dual_local: np.ndarray
    dual_halo: np.ndarray
    dual_signs: np.ndarray
    local_of_global: np.ndarray = field(repr=False)

    @property
    def s_n(self):
        return len(self.core_nodes) + len(self.halo_nodes)

    @property
    def n_core(self):
        return len(self.core_nodes)

    @property
    def q_n(self):
        return len(self.dual_gids)

    @property
    def local_nodes(self):
        return np.concatenate([self.core_nodes, self.halo_nodes])

    def apply_M(self, u):
        """Signed selection of constrained nodes: local primal -> local dual."""
        return self.dual_signs * u[self.dual_local]

    def apply_MT(self, lam):
        """Transpose of apply_M (scatter-add; nodes may carry several duals)."""
        out = np.zeros(self.s_n)
        np.add.at(out, self.dual_local, self.dual_signs * lam)
        return out

    def apply_M_halo(self, v_halo):
        """Halo-column block of M applied to a halo-sized vector."""
        out = np.zeros(self.q_n)
        sel = self.dual_halo >= 0
        out[sel] = self.dual_signs[sel] * v_halo[self.dual_halo[sel]]
        return out

    def apply_MT_halo(self, lam):
        out = np.zeros(len(self.halo_nodes))
        sel = self.dual_halo >= 0
        np.add.at(out, self.dual_halo[sel], self.dual_signs[sel] * lam[sel])
        return out

    def blocks(self):
        """Core/halo partition A_cc, A_ch, A_hc, A_hh of the local matrix."""
        nc = self.n_core
        return (self.A[:nc, :nc], self.A[:nc, nc:],
                self.A[nc:, :nc], self.A[nc:, nc:])


def assemble_subdomain(decomp, kernel, n, f_source, g_data, kern=None):
    """Assemble the multiplicity-weighted local system of subdomain n."""
    lattice = decomp.lattice
    if kernel.delta != lattice.delta:
        raise ValueError("kernel horizon does not match lattice horizon")
    if not (0 <= n < decomp.n_subdomains):
        raise ValueError(f"subdomain id {n} out of range")
    kern = kern or kernels.active
    L, m, E = lattice.L, lattice.m, lattice.ext_side

    core = decomp.core_nodes[n]
    halo = decomp.halo_nodes[n]
    local_nodes = np.concatenate([core, halo])
    s_n = len(local_nodes)
    node_ij = lattice.interior_ij[local_nodes]
    rows_ext = lattice.ext_flat(node_ij)

    col_of_ext = np.full(E * E, -1, dtype=np.int64)
    col_of_ext[rows_ext] = np.arange(s_n)
    gmask = np.zeros(E * E, dtype=np.uint8)
    gval = np.zeros(E * E)
    gam = decomp.dirichlet_nodes[n]
    if len(gam):
        gext = lattice.ext_flat(lattice.gamma_ij[gam])
        gmask[gext] = 1
        gval[gext] = _field_values(g_data, lattice.gamma_xy)[gam]

    zetaF = _popcount64(decomp.maskF_int[local_nodes]).sum(axis=1)
    f_all = _field_values(f_source, lattice.interior_xy)

    oi, oj, ov, diag, fvec = kern.assemble_operator(
        np.ascontiguousarray(rows_ext),
        np.ascontiguousarray(f_all[local_nodes]),
        1.0 / zetaF.astype(np.float64),
        col_of_ext, gmask, gval, decomp.maskA_ext,
        E, m, kernel.stencil_table(m, lattice.h), lattice.weight)

    local_of_global = np.full(L * L, -1, dtype=np.int64)
    local_of_global[local_nodes] = np.arange(s_n)
    cons = decomp.constraints
    dual_local = local_of_global[cons.dual_nodes[n]]
    dual_halo = np.where(dual_local >= len(core), dual_local - len(core), -1)

    return SubdomainSystem(
        n=n, core_nodes=core, halo_nodes=halo,
        A=_finalize_csr(s_n, oi, oj, ov, diag), f=fvec,
        floating=bool(decomp.floating[n]),
        dual_gids=cons.dual_gids[n], dual_local=dual_local,
        dual_halo=dual_halo, dual_signs=cons.dual_signs[n].astype(np.float64),
        local_of_global=local_of_global)


def nullspace_basis(subsys):
    """Nullspace column Z_n: normalized constants if floating, else zeros."""
    if subsys.floating:
        return np.full(subsys.s_n, 1.0 / math.sqrt(subsys.s_n))
    return np.zeros(subsys.s_n)


@dataclass
class CoarseSystem:
    """Replicated coarse problem G'G built from the nullspace columns."""

    z: int
    G_local: list                 # per subdomain: (q_n, z) rows of G
    g: np.ndarray                 # Z' f_eps, length z
    gtg: np.ndarray
    gtg_pinv: np.ndarray

    #: relative eigenvalue cutoff for the pseudoinverse of G'G
    RCOND = 1e-12


def _pinv_sym(mat, rcond):
    w, V = np.linalg.eigh(mat)
    wmax = float(w.max(initial=0.0))
    keep = w > rcond * wmax
    winv = np.zeros_like(w)
    winv[keep] = 1.0 / w[keep]
    return (V * winv) @ V.T


def assemble_coarse(subsystems, topology, backend):
    """Assemble G_local, g and the replicated (G'G) pseudoinverse.

    Each worker contributes its own column of G (M_n Z_n) on its dual rows;
    one halo exchange completes the off-column entries and one coarse
    reduction assembles G'G, which every worker then inverts redundantly.
    """
    N = topology.n_workers

    def local_column(n, subsys):
        X = np.zeros((subsys.q_n, N))
        X[:, n] = subsys.apply_M(nullspace_basis(subsys))
        return X

    X = backend.run(local_column, subsystems)
    G_local = runtime.halo_exchange(topology, X)

    def gtg_row(n, subsys):
        contrib = np.zeros((N, N))
        contrib[n] = X[n][:, n] @ G_local[n]
        return contrib

    gtg = runtime.coarse_reduce(topology, backend.run(gtg_row, subsystems))

    def g_row(n, subsys):
        contrib = np.zeros(N)
        contrib[n] = nullspace_basis(subsys) @ subsys.f
        return contrib

    g = runtime.coarse_reduce(topology, backend.run(g_row, subsystems))

    # Solved redundantly on every worker; results are bit-identical, keep one.
    pinvs = backend.run(lambda n, _s: _pinv_sym(gtg, CoarseSystem.RCOND),
                        subsystems)
    return CoarseSystem(z=N, G_local=G_local, g=g, gtg=gtg, gtg_pinv=pinvs[0])
