# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: stencil assembly and up-looking LDL' factorization.

Mirrors nlfeti.kernels.fallback; per-row accumulation order is offset-major
so assembled stiffness and load values agree bit for bit with the fallback.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef extern from *:
    """
    static inline int popcount64(unsigned long long x) {
        return __builtin_popcountll(x);
    }
    """
    int popcount64(unsigned long long x) nogil

name = "compiled"


def assemble_operator(cnp.int64_t[::1] rows_ext,
                      cnp.float64_t[::1] row_f,
                      cnp.float64_t[::1] row_zetaF_inv,
                      cnp.int64_t[::1] col_of_ext,
                      cnp.uint8_t[::1] gmask_of_ext,
                      cnp.float64_t[::1] gval_of_ext,
                      maskA_ext,
                      Py_ssize_t E, Py_ssize_t m,
                      cnp.float64_t[::1] gamma_tab,
                      double h2):
    cdef Py_ssize_t s = rows_ext.shape[0]
    cdef Py_ssize_t side = 2 * m + 1
    cdef Py_ssize_t cap = s * (side * side - 1)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out_i = np.empty(cap, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out_j = np.empty(cap, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out_v = np.empty(cap)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] diag = np.zeros(s)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fvec = np.empty(s)

    cdef cnp.int64_t[::1] oi = out_i
    cdef cnp.int64_t[::1] oj = out_j
    cdef cnp.float64_t[::1] ov = out_v
    cdef cnp.float64_t[::1] dg = diag
    cdef cnp.float64_t[::1] fv = fvec

    cdef bint use_zeta = maskA_ext is not None
    cdef cnp.uint64_t[:, ::1] mask
    cdef Py_ssize_t W = 0
    if use_zeta:
        mask = maskA_ext
        W = mask.shape[1]

    cdef Py_ssize_t r, di, dj, w, nnz = 0
    cdef cnp.int64_t re, ne, col
    cdef long long zeta
    cdef double t2, val
    cdef bint gm, active, bad = False

    with nogil:
        for r in range(s):
            re = rows_ext[r]
            fv[r] = row_zetaF_inv[r] * row_f[r] * h2
            for di in range(-m, m + 1):
                for dj in range(-m, m + 1):
                    if di == 0 and dj == 0:
                        continue
                    ne = re + (di * E + dj)
                    col = col_of_ext[ne]
                    gm = gmask_of_ext[ne] != 0
                    active = (col >= 0) or gm
                    t2 = 2.0 * gamma_tab[(di + m) * side + (dj + m)]
                    if use_zeta:
                        zeta = 0
                        for w in range(W):
                            zeta += popcount64(mask[re, w] & mask[ne, w])
                        if active and zeta == 0:
                            bad = True
                            break
                        if zeta == 0:
                            zeta = 1
                        val = t2 / (<double>zeta)
                    else:
                        val = t2
                    if active:
                        dg[r] += val
                    if col >= 0:
                        oi[nnz] = r
                        oj[nnz] = col
                        ov[nnz] = -val
                        nnz += 1
                    if gm:
                        fv[r] += val * gval_of_ext[ne]
                if bad:
                    break
            if bad:
                break

    if bad:
        raise ValueError("interacting pair not covered by any subdomain")
    return out_i[:nnz], out_j[:nnz], out_v[:nnz], diag, fvec


def ldl_symbolic(Py_ssize_t n, cnp.int64_t[::1] Ap, cnp.int64_t[::1] Ai):
    cdef cnp.ndarray[cnp.int64_t, ndim=1] parent = np.full(n, -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] Lp = np.zeros(n + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] par = parent
    cdef cnp.int64_t[::1] lnz = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] flag = np.full(n, -1, dtype=np.int64)
    cdef Py_ssize_t k, p
    cdef cnp.int64_t i

    with nogil:
        for k in range(n):
            flag[k] = k
            for p in range(Ap[k], Ap[k + 1]):
                i = Ai[p]
                while i < k and flag[i] != k:
                    if par[i] == -1:
                        par[i] = k
                    lnz[i] += 1
                    flag[i] = k
                    i = par[i]
    cdef Py_ssize_t j
    for j in range(n):
        Lp[j + 1] = Lp[j] + lnz[j]
    return parent, Lp


def ldl_numeric(Py_ssize_t n, cnp.int64_t[::1] Ap, cnp.int64_t[::1] Ai,
                cnp.float64_t[::1] Ax, cnp.int64_t[::1] parent,
                cnp.int64_t[::1] Lp):
    cdef cnp.ndarray[cnp.int64_t, ndim=1] Li = np.zeros(Lp[n], dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] Lx = np.zeros(Lp[n])
    cdef cnp.ndarray[cnp.float64_t, ndim=1] D = np.zeros(n)
    cdef cnp.int64_t[::1] li = Li
    cdef cnp.float64_t[::1] lx = Lx
    cdef cnp.float64_t[::1] d = D
    cdef cnp.float64_t[::1] Y = np.zeros(n)
    cdef cnp.int64_t[::1] pattern = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] stack = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] lnz = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] flag = np.full(n, -1, dtype=np.int64)

    cdef Py_ssize_t k, p, top, depth, srec, p0, p1
    cdef cnp.int64_t i
    cdef double yi, lki
    cdef Py_ssize_t badk = -1

    with nogil:
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
            d[k] = Y[k]
            Y[k] = 0.0
            for srec in range(top, n):
                i = pattern[srec]
                yi = Y[i]
                Y[i] = 0.0
                p0 = Lp[i]
                p1 = Lp[i] + lnz[i]
                for p in range(p0, p1):
                    Y[li[p]] -= lx[p] * yi
                lki = yi / d[i]
                d[k] -= lki * yi
                li[p1] = k
                lx[p1] = lki
                lnz[i] += 1
            if d[k] == 0.0:
                badk = k
                break
    return Li, Lx, D, badk


cdef void _ldl_solve_inplace(Py_ssize_t n, cnp.int64_t[::1] Lp,
                             cnp.int64_t[::1] Li, cnp.float64_t[::1] Lx,
                             cnp.float64_t[::1] D,
                             cnp.float64_t[::1] x) noexcept nogil:
    cdef Py_ssize_t j, p
    cdef double acc
    for j in range(n):
        for p in range(Lp[j], Lp[j + 1]):
            x[Li[p]] -= Lx[p] * x[j]
    for j in range(n):
        x[j] /= D[j]
    for j in range(n - 1, -1, -1):
        acc = 0.0
        for p in range(Lp[j], Lp[j + 1]):
            acc += Lx[p] * x[Li[p]]
        x[j] -= acc


def ldl_solve(Py_ssize_t n, cnp.int64_t[::1] Lp, cnp.int64_t[::1] Li,
              cnp.float64_t[::1] Lx, cnp.float64_t[::1] D,
              cnp.ndarray[cnp.float64_t, ndim=1] b):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = b.astype(np.float64)
    cdef cnp.float64_t[::1] x = out
    with nogil:
        _ldl_solve_inplace(n, Lp, Li, Lx, D, x)
    return out


cdef void _csr_matvec(Py_ssize_t nrows, cnp.int64_t[::1] Ap,
                      cnp.int64_t[::1] Ai, cnp.float64_t[::1] Ax,
                      cnp.float64_t[::1] x,
                      cnp.float64_t[::1] y) noexcept nogil:
    cdef Py_ssize_t i, p
    cdef double acc
    for i in range(nrows):
        acc = 0.0
        for p in range(Ap[i], Ap[i + 1]):
            acc += Ax[p] * x[Ai[p]]
        y[i] = acc


cdef double _dot(Py_ssize_t n, cnp.float64_t[::1] a,
                 cnp.float64_t[::1] b) noexcept nogil:
    cdef Py_ssize_t i
    cdef double acc = 0.0
    for i in range(n):
        acc += a[i] * b[i]
    return acc


cdef void _project_out(Py_ssize_t n, cnp.float64_t[::1] z,
                       cnp.float64_t[::1] x) noexcept nogil:
    cdef double c = _dot(n, z, x)
    cdef Py_ssize_t i
    for i in range(n):
        x[i] -= c * z[i]


def k_apply_fused(cnp.float64_t[::1] lam,
                  cnp.int64_t[::1] dual_local, cnp.float64_t[::1] dual_signs,
                  Py_ssize_t s_n, cnp.float64_t[::1] z,
                  cnp.int64_t[::1] perm, cnp.int64_t[::1] Lp,
                  cnp.int64_t[::1] Li, cnp.float64_t[::1] Lx,
                  cnp.float64_t[::1] D,
                  cnp.float64_t[::1] xbuf, cnp.float64_t[::1] pbuf):
    """One worker's K_n apply: scatter M', pseudoinverse solve, gather M.

    The whole composition runs without the GIL; bordered factorizations are
    handled through perm entries >= s_n (border slot, zero right-hand side).
    """
    cdef Py_ssize_t q_n = lam.shape[0]
    cdef Py_ssize_t nf = perm.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(q_n)
    cdef cnp.float64_t[::1] mu = out
    cdef bint has_z = z.shape[0] > 0
    cdef Py_ssize_t i, r
    cdef cnp.int64_t idx
    with nogil:
        for i in range(s_n):
            xbuf[i] = 0.0
        for r in range(q_n):
            xbuf[dual_local[r]] += dual_signs[r] * lam[r]
        if has_z:
            _project_out(s_n, z, xbuf)
        for i in range(nf):
            idx = perm[i]
            pbuf[i] = xbuf[idx] if idx < s_n else 0.0
        _ldl_solve_inplace(nf, Lp, Li, Lx, D, pbuf)
        for i in range(nf):
            idx = perm[i]
            if idx < s_n:
                xbuf[idx] = pbuf[i]
        if has_z:
            _project_out(s_n, z, xbuf)
        for r in range(q_n):
            mu[r] = dual_signs[r] * xbuf[dual_local[r]]
    return out


def q_apply_fused(cnp.float64_t[::1] resid,
                  cnp.int64_t[::1] dual_halo, cnp.float64_t[::1] dual_signs,
                  Py_ssize_t nh, Py_ssize_t nc,
                  cnp.int64_t[::1] hh_p, cnp.int64_t[::1] hh_i, cnp.float64_t[::1] hh_x,
                  cnp.int64_t[::1] hc_p, cnp.int64_t[::1] hc_i, cnp.float64_t[::1] hc_x,
                  cnp.int64_t[::1] ch_p, cnp.int64_t[::1] ch_i, cnp.float64_t[::1] ch_x,
                  Py_ssize_t cg_iters,
                  cnp.int64_t[::1] cc_p, cnp.int64_t[::1] cc_i, cnp.float64_t[::1] cc_x,
                  cnp.int64_t[::1] perm, cnp.int64_t[::1] Lp,
                  cnp.int64_t[::1] Li, cnp.float64_t[::1] Lx, cnp.float64_t[::1] D,
                  cnp.float64_t[::1] vh, cnp.float64_t[::1] yh,
                  cnp.float64_t[::1] tc, cnp.float64_t[::1] xc,
                  cnp.float64_t[::1] rc, cnp.float64_t[::1] pc,
                  cnp.float64_t[::1] apc):
    """One worker's Dirichlet-preconditioner apply Q_n = M_h S_n M_h'.

    The interior solve is the exact LDL factorization when cg_iters == 0,
    otherwise exactly cg_iters conjugate-gradient steps on A_cc (zero start),
    mirroring linalg.cg_fixed.
    """
    cdef Py_ssize_t q_n = resid.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(q_n)
    cdef cnp.float64_t[::1] res = out
    cdef Py_ssize_t i, r, it
    cdef cnp.int64_t idx
    cdef double rr, rr_new, pap, alpha
    with nogil:
        for i in range(nh):
            vh[i] = 0.0
        for r in range(q_n):
            idx = dual_halo[r]
            if idx >= 0:
                vh[idx] += dual_signs[r] * resid[r]
        _csr_matvec(nc, ch_p, ch_i, ch_x, vh, tc)
        if nc > 0:
            if cg_iters == 0:
                for i in range(nc):
                    rc[i] = tc[perm[i]]
                _ldl_solve_inplace(nc, Lp, Li, Lx, D, rc)
                for i in range(nc):
                    xc[perm[i]] = rc[i]
            else:
                for i in range(nc):
                    xc[i] = 0.0
                    rc[i] = tc[i]
                rr = _dot(nc, rc, rc)
                if rr != 0.0:
                    for i in range(nc):
                        pc[i] = rc[i]
                    for it in range(cg_iters):
                        _csr_matvec(nc, cc_p, cc_i, cc_x, pc, apc)
                        pap = _dot(nc, pc, apc)
                        if pap <= 0.0:
                            break
                        alpha = rr / pap
                        for i in range(nc):
                            xc[i] += alpha * pc[i]
                            rc[i] -= alpha * apc[i]
                        rr_new = _dot(nc, rc, rc)
                        if rr_new == 0.0:
                            break
                        for i in range(nc):
                            pc[i] = rc[i] + (rr_new / rr) * pc[i]
                        rr = rr_new
        _csr_matvec(nh, hh_p, hh_i, hh_x, vh, yh)
        _csr_matvec(nh, hc_p, hc_i, hc_x, xc, vh)
        for i in range(nh):
            yh[i] -= vh[i]
        for r in range(q_n):
            idx = dual_halo[r]
            res[r] = dual_signs[r] * yh[idx] if idx >= 0 else 0.0
    return out
