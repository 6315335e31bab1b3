"""Pure numpy implementations of the hot kernels.

Semantics match the compiled core (nlfeti.kernels._core) operation for
operation; the stiffness/load accumulation order per row is offset-major in
both, so assembled values agree bit for bit.  The LDL' routines follow the
classic up-looking algorithm driven by the elimination tree.
"""

from __future__ import annotations

import numpy as np

name = "python"

_HAVE_BITWISE_COUNT = hasattr(np, "bitwise_count")
if not _HAVE_BITWISE_COUNT:
    _POP8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def _popcount64(arr):
    """Bit count per element of a uint64 array."""
    if _HAVE_BITWISE_COUNT:
        return np.bitwise_count(arr)
    bytes_ = arr.view(np.uint8).reshape(*arr.shape, 8)
    return _POP8[bytes_].sum(axis=-1, dtype=np.int64)


def assemble_operator(rows_ext, row_f, row_zetaF_inv, col_of_ext, gmask_of_ext,
                      gval_of_ext, maskA_ext, E, m, gamma_tab, h2):
    """Stencil assembly of one stiffness/load pair.

    rows_ext holds the extended-grid flat index of each target row node; the
    grid-sized arrays map extended flat indices to target column index (-1 if
    absent), Dirichlet membership and Dirichlet data.  maskA_ext carries the
    overlap-membership bitmask words, or None for multiplicity-one assembly.
    Returns COO triplets of the off-diagonal entries plus dense diagonal and
    load arrays.
    """
    s = len(rows_ext)
    side = 2 * m + 1
    diag = np.zeros(s)
    fvec = row_zetaF_inv * row_f * h2
    rows_local = np.arange(s, dtype=np.int64)
    if maskA_ext is not None:
        rows_mask = maskA_ext[rows_ext]

    out_i, out_j, out_v = [], [], []
    for di in range(-m, m + 1):
        for dj in range(-m, m + 1):
            if di == 0 and dj == 0:
                continue
            neigh = rows_ext + (di * E + dj)
            cols = col_of_ext[neigh]
            gmask = gmask_of_ext[neigh].astype(bool)
            in_cols = cols >= 0
            active = in_cols | gmask

            t2 = 2.0 * gamma_tab[(di + m) * side + (dj + m)]
            if maskA_ext is None:
                vals = np.full(s, t2)
            else:
                zeta = _popcount64(rows_mask & maskA_ext[neigh]).sum(axis=1)
                if np.any(active & (zeta == 0)):
                    raise ValueError("interacting pair not covered by any subdomain")
                vals = t2 / np.maximum(zeta, 1).astype(np.float64)

            diag += np.where(active, vals, 0.0)
            out_i.append(rows_local[in_cols])
            out_j.append(cols[in_cols])
            out_v.append(-vals[in_cols])
            if gmask.any():
                fvec += np.where(gmask, vals * gval_of_ext[neigh], 0.0)

    return (np.concatenate(out_i), np.concatenate(out_j), np.concatenate(out_v),
            diag, fvec)


def ldl_symbolic(n, Ap, Ai):
    """Elimination tree and column counts for the upper-triangular CSC pattern."""
    parent = np.full(n, -1, dtype=np.int64)
    lnz = np.zeros(n, dtype=np.int64)
    flag = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        flag[k] = k
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i < k and flag[i] != k:
                if parent[i] == -1:
                    parent[i] = k
                lnz[i] += 1
                flag[i] = k
                i = parent[i]
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(lnz, out=Lp[1:])
    return parent, Lp


def ldl_numeric(n, Ap, Ai, Ax, parent, Lp):
    """Up-looking LDL' factorization; returns (Li, Lx, D, bad_pivot).

    bad_pivot is the first column with an exactly zero pivot (factorization
    stops there), or -1 on success.  Pivot sign policy is left to the caller.
    """
    Li = np.zeros(Lp[n], dtype=np.int64)
    Lx = np.zeros(Lp[n])
    D = np.zeros(n)
    Y = np.zeros(n)
    pattern = np.zeros(n, dtype=np.int64)
    stack = np.zeros(n, dtype=np.int64)
    lnz = np.zeros(n, dtype=np.int64)
    flag = np.full(n, -1, dtype=np.int64)

    for k in range(n):
        top = n
        flag[k] = k
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            Y[i] += Ax[p]
            depth = 0
            while flag[i] != k:
                stack[depth] = i
                depth += 1
                flag[i] = k
                i = parent[i]
            while depth > 0:
                top -= 1
                depth -= 1
                pattern[top] = stack[depth]
        D[k] = Y[k]
        Y[k] = 0.0
        for srec in range(top, n):
            i = pattern[srec]
            yi = Y[i]
            Y[i] = 0.0
            p0, p1 = Lp[i], Lp[i] + lnz[i]
            Y[Li[p0:p1]] -= Lx[p0:p1] * yi
            lki = yi / D[i]
            D[k] -= lki * yi
            Li[p1] = k
            Lx[p1] = lki
            lnz[i] += 1
        if D[k] == 0.0:
            return Li, Lx, D, k
    return Li, Lx, D, -1


def ldl_solve(n, Lp, Li, Lx, D, b):
    """Solve L D L' x = b for one right-hand side."""
    x = b.astype(np.float64, copy=True)
    for j in range(n):
        p0, p1 = Lp[j], Lp[j + 1]
        x[Li[p0:p1]] -= Lx[p0:p1] * x[j]
    x /= D
    for j in range(n - 1, -1, -1):
        p0, p1 = Lp[j], Lp[j + 1]
        x[j] -= Lx[p0:p1] @ x[Li[p0:p1]]
    return x
