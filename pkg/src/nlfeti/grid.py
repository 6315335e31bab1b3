"""Particle lattice on the unit square and its nonlocal domain decomposition.

The domain [0,1]^2 is discretized by L x L cell-centered particles with
spacing h = 1/L; the surrounding interaction layer of thickness delta = m*h
holds exactly m extra particle rings per side.  All neighborhoods are
l-infinity balls and every set membership test reduces to exact integer
comparisons on grid indices (distance k*h versus m*h/2 is decided as
2k versus m), so the decomposition is reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class InvalidDimensionError(ValueError):
    """Lattice parameters violate L >= 2 or 1 <= m < L."""


class IndivisibleGridError(ValueError):
    """Subdomain count per direction does not divide the lattice size."""


class SubdomainTooThinError(ValueError):
    """Subdomain width L/p does not exceed the horizon in cells."""


class _Rect(NamedTuple):
    """Inclusive index rectangle [ilo, ihi] x [jlo, jhi]."""

    ilo: int
    ihi: int
    jlo: int
    jhi: int

    @property
    def empty(self):
        return self.ihi < self.ilo or self.jhi < self.jlo

    def dilate(self, k):
        return _Rect(self.ilo - k, self.ihi + k, self.jlo - k, self.jhi + k)

    def clip(self, other):
        return _Rect(max(self.ilo, other.ilo), min(self.ihi, other.ihi),
                     max(self.jlo, other.jlo), min(self.jhi, other.jhi))

    def intersects(self, other):
        return not self.clip(other).empty

    def contains(self, gi, gj):
        return (self.ilo <= gi) & (gi <= self.ihi) & (self.jlo <= gj) & (gj <= self.jhi)

    def linf_dist(self, gi, gj):
        """Chebyshev distance (in cells) from nodes (gi, gj) to this rectangle."""
        di = np.maximum(np.maximum(self.ilo - gi, gi - self.ihi), 0)
        dj = np.maximum(np.maximum(self.jlo - gj, gj - self.jhi), 0)
        return np.maximum(di, dj)

    def node_indices(self, L):
        """Row-major global interior indices of the nodes inside, ascending."""
        ii = np.arange(self.ilo, self.ihi + 1, dtype=np.int64)
        jj = np.arange(self.jlo, self.jhi + 1, dtype=np.int64)
        return (ii[:, None] * L + jj[None, :]).ravel()


@dataclass(frozen=True)
class ParticleLattice:
    """Uniform cell-centered lattice with its interaction layer.

    Interior nodes x_ij = ((i+1/2)h, (j+1/2)h) for i, j in 0..L-1 are ordered
    row-major (index = i*L + j).  Interaction-layer (gamma) nodes extend the
    index range to -m..L+m-1 per axis and are ordered row-major over the
    extended box, skipping the interior range.
    """

    L: int
    m: int
    interior_ij: np.ndarray = field(repr=False)   # (L^2, 2) grid indices
    gamma_ij: np.ndarray = field(repr=False)      # (b, 2) grid indices

    @property
    def h(self):
        return 1.0 / self.L

    @property
    def delta(self):
        return self.m / self.L

    @property
    def weight(self):
        """Quadrature weight h^2, identical for every node."""
        return self.h * self.h

    @property
    def n_interior(self):
        return self.L * self.L

    @property
    def n_gamma(self):
        return len(self.gamma_ij)

    @property
    def ext_side(self):
        """Side length of the extended index box (interior plus gamma rings)."""
        return self.L + 2 * self.m

    @property
    def interior_xy(self):
        return (self.interior_ij + 0.5) * self.h

    @property
    def gamma_xy(self):
        return (self.gamma_ij + 0.5) * self.h

    def ext_flat(self, ij):
        """Flat index into the extended (L+2m)^2 box for grid coordinates."""
        E = self.ext_side
        return (ij[..., 0] + self.m) * E + (ij[..., 1] + self.m)

    @property
    def gamma_ordinal_of_ext(self):
        """Gamma-node ordinal per extended flat index, -1 elsewhere."""
        E = self.ext_side
        out = np.full(E * E, -1, dtype=np.int64)
        out[self.ext_flat(self.gamma_ij)] = np.arange(self.n_gamma)
        return out


def build_lattice(L, m):
    """Build the particle lattice for [0,1]^2 with horizon m cells.

    Raises InvalidDimensionError unless L >= 2 and 1 <= m < L.
    """
    if not (isinstance(L, (int, np.integer)) and isinstance(m, (int, np.integer))):
        raise InvalidDimensionError(f"L and m must be integers, got L={L!r}, m={m!r}")
    if L < 2 or m < 1 or m >= L:
        raise InvalidDimensionError(f"need L >= 2 and 1 <= m < L, got L={L}, m={m}")
    L, m = int(L), int(m)

    rng = np.arange(L, dtype=np.int64)
    ii, jj = np.meshgrid(rng, rng, indexing="ij")
    interior = np.column_stack([ii.ravel(), jj.ravel()])

    ext = np.arange(-m, L + m, dtype=np.int64)
    ei, ej = np.meshgrid(ext, ext, indexing="ij")
    inside = (ei >= 0) & (ei < L) & (ej >= 0) & (ej < L)
    gamma = np.column_stack([ei[~inside].ravel(), ej[~inside].ravel()])

    return ParticleLattice(L=L, m=m, interior_ij=interior, gamma_ij=gamma)


@dataclass(frozen=True)
class ConstraintSet:
    """Continuity constraints u_n(x) = u_n'(x) on shared overlap nodes.

    One entry per (n, n', node) triple with n < n' and the node in both
    subdomains' interior node sets; entries are ordered lexicographically by
    (n, n', row-major node index), which fixes the global dual numbering.
    The smaller pair member carries sign +1, the larger -1.
    """

    q: int
    entry_pair: np.ndarray        # (q, 2) subdomain pair, n < n'
    entry_node: np.ndarray        # (q,)  global interior node index
    dual_gids: list               # per subdomain: global dual ids, ascending
    dual_nodes: list              # per subdomain: node index per local dual
    dual_signs: list              # per subdomain: +1/-1 per local dual
    pair_slices: dict             # (n, n') -> (slice in n's duals, slice in n''s)

    def q_of(self, n):
        return len(self.dual_gids[n])


@dataclass(frozen=True)
class Decomposition:
    """p x p nonlocal decomposition of the lattice.

    Per subdomain n (row-major block order, 0-based): the core Omega_n keeps
    the block's nodes strictly farther than delta/2 from every foreign block
    node, the halo holds interior nodes within delta of the core, and the
    Dirichlet set holds gamma nodes within delta of the core.  Membership
    multiplicities are stored as bitmask words over the extended grid.
    """

    lattice: ParticleLattice
    p: int
    block_rects: list
    core_rects: list
    core_nodes: list              # per n: sorted global interior indices
    halo_nodes: list
    dirichlet_nodes: list         # per n: sorted gamma ordinals
    floating: np.ndarray          # (N,) bool
    neighbor_pairs: list          # sorted (n, n') with overlapping node sets
    maskA_ext: np.ndarray = field(repr=False)   # (E^2, W) uint64 membership words
    maskF_int: np.ndarray = field(repr=False)   # (L^2, W) uint64 membership words
    constraints: ConstraintSet = field(repr=False, default=None)

    @property
    def n_subdomains(self):
        return self.p * self.p

    @property
    def words(self):
        return self.maskF_int.shape[1]

    def lambda_rect(self, n):
        """Rectangle of Lambda_n = Omega_n union Gamma_hat_n (interior nodes)."""
        L = self.lattice.L
        return self.core_rects[n].dilate(self.lattice.m).clip(_Rect(0, L - 1, 0, L - 1))

    def local_nodes(self, n):
        """Lambda_n ordered core-first then halo, each ascending row-major."""
        return np.concatenate([self.core_nodes[n], self.halo_nodes[n]])

    def owner_of_node(self, node):
        """Subdomain whose non-overlapping block contains the interior node."""
        L, w = self.lattice.L, self.lattice.L // self.p
        gi, gj = node // L, node % L
        return (gi // w) * self.p + (gj // w)

    def membership_A(self, kind, idx):
        """Sorted subdomains whose Omega_n/Gamma_hat_n/Gamma_n hold the node.

        kind is "interior" (row-major interior index) or "gamma" (gamma
        ordinal in the lattice's gamma ordering).
        """
        lat = self.lattice
        ij = lat.interior_ij[idx] if kind == "interior" else lat.gamma_ij[idx]
        words = self.maskA_ext[lat.ext_flat(ij)]
        return _bits_of(words)

    def membership_F(self, idx):
        """Sorted subdomains whose Omega_n union Gamma_hat_n holds the interior node."""
        return _bits_of(self.maskF_int[idx])


def _bits_of(words):
    out = []
    for w, word in enumerate(words):
        word = int(word)
        while word:
            b = word & -word
            out.append(64 * w + b.bit_length() - 1)
            word ^= b
    return out


def partition(lattice, p):
    """Decompose the lattice into p x p subdomains.

    Requires p to divide L and each block to be wider than the horizon
    (L/p > m); raises IndivisibleGridError / SubdomainTooThinError otherwise.
    """
    L, m = lattice.L, lattice.m
    p = int(p)
    if p < 1 or L % p != 0:
        raise IndivisibleGridError(f"p={p} does not divide L={L}")
    w = L // p
    if w <= m:
        raise SubdomainTooThinError(f"subdomain width L/p={w} must exceed m={m}")

    N = p * p
    W = (N + 63) // 64
    E = lattice.ext_side
    shrink = m // 2  # smallest t with 2*(t+1) > m

    gi = lattice.interior_ij[:, 0]
    gj = lattice.interior_ij[:, 1]
    ggi = lattice.gamma_ij[:, 0]
    ggj = lattice.gamma_ij[:, 1]

    block_rects, core_rects = [], []
    core_nodes, halo_nodes, dirichlet_nodes = [], [], []
    floating = np.zeros(N, dtype=bool)
    maskA_ext = np.zeros((E * E, W), dtype=np.uint64)
    maskF_int = np.zeros((L * L, W), dtype=np.uint64)
    int_ext = lattice.ext_flat(lattice.interior_ij)
    gam_ext = lattice.ext_flat(lattice.gamma_ij)

    for bi in range(p):
        for bj in range(p):
            n = bi * p + bj
            block = _Rect(bi * w, bi * w + w - 1, bj * w, bj * w + w - 1)
            core = _Rect(block.ilo + (shrink if bi > 0 else 0),
                         block.ihi - (shrink if bi < p - 1 else 0),
                         block.jlo + (shrink if bj > 0 else 0),
                         block.jhi - (shrink if bj < p - 1 else 0))
            block_rects.append(block)
            core_rects.append(core)

            dist_int = core.linf_dist(gi, gj)
            in_core = dist_int == 0
            in_halo = (dist_int >= 1) & (dist_int <= m)
            in_gam = core.linf_dist(ggi, ggj) <= m

            core_nodes.append(np.flatnonzero(in_core))
            halo_nodes.append(np.flatnonzero(in_halo))
            dirichlet_nodes.append(np.flatnonzero(in_gam))
            floating[n] = not in_gam.any()

            bit = np.uint64(1 << (n % 64))
            lam = in_core | in_halo
            maskF_int[lam, n // 64] |= bit
            maskA_ext[int_ext[lam], n // 64] |= bit
            maskA_ext[gam_ext[in_gam], n // 64] |= bit

    decomp = Decomposition(
        lattice=lattice, p=p,
        block_rects=block_rects, core_rects=core_rects,
        core_nodes=core_nodes, halo_nodes=halo_nodes,
        dirichlet_nodes=dirichlet_nodes, floating=floating,
        neighbor_pairs=_neighbor_pairs(lattice, p, core_rects),
        maskA_ext=maskA_ext, maskF_int=maskF_int,
    )
    object.__setattr__(decomp, "constraints", _enumerate_constraints(decomp))
    return decomp


def _neighbor_pairs(lattice, p, core_rects):
    L, m = lattice.L, lattice.m
    grid = _Rect(0, L - 1, 0, L - 1)
    lam = [core_rects[n].dilate(m).clip(grid) for n in range(p * p)]
    return [(a, b) for a in range(p * p) for b in range(a + 1, p * p)
            if lam[a].intersects(lam[b])]


def _enumerate_constraints(decomp):
    """Constraints on every node shared by two subdomains' node sets.

    Note this is the full overlap Lambda_n intersected with Lambda_n'.  For
    even m it coincides with the halo-halo intersection (cores of distinct
    subdomains are then more than delta apart); for odd m the overlap also
    reaches one core layer, and those nodes must be constrained too for the
    multi-domain system to match the single-domain one.
    """
    L = decomp.lattice.L
    entry_pair, entry_node = [], []
    per_sub = [[] for _ in range(decomp.n_subdomains)]
    pair_slices = {}
    q = 0
    for a, b in decomp.neighbor_pairs:
        overlap = decomp.lambda_rect(a).clip(decomp.lambda_rect(b))
        nodes = overlap.node_indices(L)
        k = len(nodes)
        entry_pair.append(np.column_stack([np.full(k, a), np.full(k, b)]))
        entry_node.append(nodes)
        gids = np.arange(q, q + k)
        per_sub[a].append((gids, nodes, +1))
        per_sub[b].append((gids, nodes, -1))
        q += k

    dual_gids, dual_nodes, dual_signs = [], [], []
    for n, chunks in enumerate(per_sub):
        if chunks:
            gids = np.concatenate([c[0] for c in chunks])
            nodes = np.concatenate([c[1] for c in chunks])
            signs = np.concatenate([np.full(len(c[1]), c[2], dtype=np.int8)
                                    for c in chunks])
            order = np.argsort(gids, kind="stable")
            dual_gids.append(gids[order])
            dual_nodes.append(nodes[order])
            dual_signs.append(signs[order])
        else:
            dual_gids.append(np.empty(0, dtype=np.int64))
            dual_nodes.append(np.empty(0, dtype=np.int64))
            dual_signs.append(np.empty(0, dtype=np.int8))

    # Per-pair contiguous slices in both owners' (gid-sorted) dual lists.
    start = 0
    for (a, b), nodes in zip(decomp.neighbor_pairs,
                             entry_node if entry_node else []):
        k = len(nodes)
        # Global ids of a pair block are consecutive, so the block occupies a
        # contiguous run in each owner's sorted dual list.
        ia = np.searchsorted(dual_gids[a], start)
        ib = np.searchsorted(dual_gids[b], start)
        pair_slices[(a, b)] = (slice(ia, ia + k), slice(ib, ib + k))
        start += k

    return ConstraintSet(
        q=q,
        entry_pair=(np.concatenate(entry_pair) if entry_pair
                    else np.empty((0, 2), dtype=np.int64)),
        entry_node=(np.concatenate(entry_node) if entry_node
                    else np.empty(0, dtype=np.int64)),
        dual_gids=dual_gids, dual_nodes=dual_nodes, dual_signs=dual_signs,
        pair_slices=pair_slices,
    )


def enumerate_constraints(decomp):
    """Return the decomposition's constraint set (built during partition)."""
    return decomp.constraints


def zeta_values(decomp, i, j):
    """Overlap multiplicities (zeta_A(i, j), zeta_F(i)) for interior nodes i, j.

    Node indices address the interior lattice; gamma nodes can be queried by
    passing (kind, ordinal) tuples such as ("gamma", 3).  zeta_F of a gamma
    node is 0 by convention (gamma nodes never belong to Omega_n or
    Gamma_hat_n).
    """
    lat = decomp.lattice

    def ext_of(node):
        if isinstance(node, tuple):
            kind, idx = node
            ij = lat.interior_ij[idx] if kind == "interior" else lat.gamma_ij[idx]
        else:
            ij = lat.interior_ij[node]
        return lat.ext_flat(ij)

    wa = decomp.maskA_ext[ext_of(i)] & decomp.maskA_ext[ext_of(j)]
    zeta_a = int(sum(int(w).bit_count() for w in wa))
    if isinstance(i, tuple) and i[0] == "gamma":
        zeta_f = 0
    else:
        idx = i[1] if isinstance(i, tuple) else i
        zeta_f = int(sum(int(w).bit_count() for w in decomp.maskF_int[idx]))
    return zeta_a, zeta_f
