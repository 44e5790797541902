# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled batched Newton power-flow kernel.

Same contract as :func:`dpphasor._newton_py.newton_batch`; one system is
solved at a time with a dense in-place LU (partial pivoting) so small
feeders avoid per-call numpy overhead.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, cos, sin, isfinite
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef int MAX_HALVINGS = 30


cdef inline void _curve(const double[::1] vx, const double[::1] vy,
                        Py_ssize_t lo, Py_ssize_t hi, double u,
                        double* ang, double* slope) noexcept nogil:
    cdef Py_ssize_t j
    cdef double s
    ang[0] = 0.0
    slope[0] = 0.0
    if hi <= lo:
        return
    if u < vx[lo]:
        ang[0] = vy[lo]
        return
    if u >= vx[hi - 1]:
        ang[0] = vy[hi - 1]
        return
    j = lo
    while j + 1 < hi and vx[j + 1] <= u:
        j += 1
    s = (vy[j + 1] - vy[j]) / (vx[j + 1] - vx[j])
    slope[0] = s
    ang[0] = vy[j] + s * (u - vx[j])


cdef double _mismatch(Py_ssize_t n,
                      const double[:, ::1] G, const double[:, ::1] B,
                      const double[::1] br, const double[::1] bi,
                      const double* spr, const double* spi, const double* gm,
                      const double[::1] vx, const double[::1] vy, const cnp.int64_t[::1] vp,
                      const double* xr, const double* xi,
                      double* mr, double* mi, double* cr, double* ci,
                      double* sgr, double* sgi, double* av, double* sl,
                      double* rinf) noexcept nogil:
    """Fill mismatch and helpers; return the residual 2-norm."""
    cdef Py_ssize_t k, j
    cdef double ir, ii, ang, slope, r2 = 0.0, a, mx = 0.0
    for k in range(n):
        ir = br[k]
        ii = bi[k]
        for j in range(n):
            ir += G[k, j] * xr[j] - B[k, j] * xi[j]
            ii += G[k, j] * xi[j] + B[k, j] * xr[j]
        cr[k] = ir
        ci[k] = ii
        av[k] = sqrt(xr[k] * xr[k] + xi[k] * xi[k])
        _curve(vx, vy, vp[k], vp[k + 1], av[k], &ang, &slope)
        sl[k] = slope
        sgr[k] = gm[k] * cos(ang)
        sgi[k] = gm[k] * sin(ang)
        # v * conj(i)
        mr[k] = xr[k] * ir + xi[k] * ii - sgr[k] + spr[k]
        mi[k] = xi[k] * ir - xr[k] * ii - sgi[k] + spi[k]
        a = mr[k] * mr[k] + mi[k] * mi[k]
        r2 += a
        a = sqrt(a)
        if a > mx or not isfinite(a):
            mx = a
    rinf[0] = mx
    return sqrt(r2)


cdef int _lu_solve(Py_ssize_t N, double* A, double* rhs) noexcept nogil:
    """Solve A x = rhs in place (row-major A). Returns 1 on a zero pivot."""
    cdef Py_ssize_t c, r, piv, j
    cdef double best, t, f
    for c in range(N):
        piv = c
        best = fabs(A[c * N + c])
        for r in range(c + 1, N):
            t = fabs(A[r * N + c])
            if t > best:
                best = t
                piv = r
        if best == 0.0 or not isfinite(best):
            return 1
        if piv != c:
            for j in range(N):
                t = A[c * N + j]
                A[c * N + j] = A[piv * N + j]
                A[piv * N + j] = t
            t = rhs[c]
            rhs[c] = rhs[piv]
            rhs[piv] = t
        for r in range(c + 1, N):
            f = A[r * N + c] / A[c * N + c]
            if f != 0.0:
                for j in range(c + 1, N):
                    A[r * N + j] -= f * A[c * N + j]
                rhs[r] -= f * rhs[c]
    for c in range(N - 1, -1, -1):
        t = rhs[c]
        for j in range(c + 1, N):
            t -= A[c * N + j] * rhs[j]
        rhs[c] = t / A[c * N + c]
        if not isfinite(rhs[c]):
            return 1
    return 0


def newton_batch_real(const double[:, ::1] G, const double[:, ::1] B,
                      const double[::1] br, const double[::1] bi,
                      const double[:, ::1] spr_all, const double[:, ::1] spi_all,
                      const double[:, ::1] gmag,
                      const double[::1] vx, const double[::1] vy, const cnp.int64_t[::1] vp,
                      double[:, ::1] vr, double[:, ::1] vi,
                      double tol, long max_iter, double damping):
    """Solve every row of (vr, vi) in place.

    Returns (residual_inf, iterations, status) arrays.
    """
    cdef Py_ssize_t m = vr.shape[0]
    cdef Py_ssize_t n = vr.shape[1]
    cdef Py_ssize_t N = 2 * n
    cdef Py_ssize_t s, k, j, h
    cdef long it
    cdef int st
    cdef double r2, rinf, t2, tinf, lam, dgr, dgi, cjr, cji, vr_, vi_, gr, gi

    res = np.zeros(m, dtype=np.float64)
    its = np.zeros(m, dtype=np.int64)
    sts = np.zeros(m, dtype=np.int64)
    cdef double[::1] res_v = res
    cdef cnp.int64_t[::1] its_v = its
    cdef cnp.int64_t[::1] sts_v = sts

    cdef double* buf = <double*> malloc(sizeof(double) * (N * N + N + 24 * n + 8))
    if buf == NULL:
        raise MemoryError()
    cdef double* A = buf
    cdef double* rhs = A + N * N
    cdef double* xr = rhs + N
    cdef double* xi = xr + n
    cdef double* mr = xi + n
    cdef double* mi = mr + n
    cdef double* cr = mi + n
    cdef double* ci = cr + n
    cdef double* sgr = ci + n
    cdef double* sgi = sgr + n
    cdef double* av = sgi + n
    cdef double* sl = av + n
    cdef double* txr = sl + n
    cdef double* txi = txr + n
    cdef double* tmr = txi + n
    cdef double* tmi = tmr + n
    cdef double* tcr = tmi + n
    cdef double* tci = tcr + n
    cdef double* tsgr = tci + n
    cdef double* tsgi = tsgr + n
    cdef double* tav = tsgi + n
    cdef double* tsl = tav + n
    cdef double* spr = tsl + n
    cdef double* spi = spr + n
    cdef double* gm = spi + n

    try:
        with nogil:
            for s in range(m):
                for k in range(n):
                    xr[k] = vr[s, k]
                    xi[k] = vi[s, k]
                    spr[k] = spr_all[s, k]
                    spi[k] = spi_all[s, k]
                    gm[k] = gmag[s, k]
                r2 = _mismatch(n, G, B, br, bi, spr, spi, gm, vx, vy, vp, xr, xi,
                               mr, mi, cr, ci, sgr, sgi, av, sl, &rinf)
                it = 0
                st = -1
                while True:
                    if rinf <= tol:
                        st = 0
                        break
                    if it >= max_iter or not isfinite(rinf):
                        st = 1
                        break
                    # real Jacobian [[dRe/dx, dRe/dy], [dIm/dx, dIm/dy]]
                    for k in range(n):
                        vr_ = xr[k]
                        vi_ = xi[k]
                        for j in range(n):
                            # v_k * conj(Y_kj)
                            gr = vr_ * G[k, j] + vi_ * B[k, j]
                            gi = vi_ * G[k, j] - vr_ * B[k, j]
                            A[k * N + j] = gr
                            A[(n + k) * N + j] = gi
                            # -1j * v_k conj(Y_kj)
                            A[k * N + n + j] = gi
                            A[(n + k) * N + n + j] = -gr
                        cjr = cr[k]
                        cji = -ci[k]
                        if av[k] > 0.0:
                            dgr = -sgi[k] * sl[k] / av[k]
                            dgi = sgr[k] * sl[k] / av[k]
                        else:
                            dgr = 0.0
                            dgi = 0.0
                        A[k * N + k] += cjr - dgr * vr_
                        A[(n + k) * N + k] += cji - dgi * vr_
                        # 1j * conj(i) - dg * y
                        A[k * N + n + k] += -cji - dgr * vi_
                        A[(n + k) * N + n + k] += cjr - dgi * vi_
                        rhs[k] = -mr[k]
                        rhs[n + k] = -mi[k]
                    if _lu_solve(N, A, rhs):
                        st = 2
                        break
                    lam = damping
                    for h in range(MAX_HALVINGS):
                        for k in range(n):
                            txr[k] = xr[k] + lam * rhs[k]
                            txi[k] = xi[k] + lam * rhs[n + k]
                        t2 = _mismatch(n, G, B, br, bi, spr, spi, gm, vx, vy, vp, txr, txi,
                                       tmr, tmi, tcr, tci, tsgr, tsgi, tav, tsl, &tinf)
                        if t2 <= r2 or h == MAX_HALVINGS - 1:
                            break
                        lam *= 0.5
                    for k in range(n):
                        xr[k] = txr[k]
                        xi[k] = txi[k]
                        mr[k] = tmr[k]
                        mi[k] = tmi[k]
                        cr[k] = tcr[k]
                        ci[k] = tci[k]
                        sgr[k] = tsgr[k]
                        sgi[k] = tsgi[k]
                        av[k] = tav[k]
                        sl[k] = tsl[k]
                    r2 = t2
                    rinf = tinf
                    it += 1
                for k in range(n):
                    vr[s, k] = xr[k]
                    vi[s, k] = xi[k]
                res_v[s] = rinf
                its_v[s] = it
                sts_v[s] = st
    finally:
        free(buf)
    return res, its, sts
