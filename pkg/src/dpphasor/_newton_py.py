"""Numpy implementation of the batched Newton power-flow kernel.

This is the fallback used when the compiled ``_newton_c`` extension is not
available. Both implementations follow the same iteration:

* residual ``F(v) - s_g(v) + s_p`` with ``F(v) = v * conj(Y v + b)``;
* Newton step on the real ``2n`` representation ``[Re v, Im v]``;
* step length starts at ``damping`` and is halved (at most 30 times) while
  the 2-norm of the residual increases;
* convergence when the max-abs complex residual is ``<= tol``.

Status codes: 0 converged, 1 no convergence within ``max_iter``,
2 singular Jacobian at an iterate.
"""

from __future__ import annotations

import numpy as np

MAX_HALVINGS = 30


def _voltvar(absv, vv_x, vv_y, vv_ptr):
    """Angle and right-slope of each bus's curve at ``absv`` (shape (m, n))."""
    ang = np.zeros_like(absv)
    slope = np.zeros_like(absv)
    n = absv.shape[1]
    for k in range(n):
        lo, hi = vv_ptr[k], vv_ptr[k + 1]
        if hi <= lo:
            continue
        x = vv_x[lo:hi]
        y = vv_y[lo:hi]
        u = absv[:, k]
        ang[:, k] = np.interp(u, x, y)
        if hi - lo > 1:
            s = np.concatenate([[0.0], np.diff(y) / np.diff(x), [0.0]])
            slope[:, k] = s[np.searchsorted(x, u, side="right")]
    return ang, slope


def _mismatch(v, y, b, sp, gmag, vv):
    cur = v @ y.T + b
    f = v * np.conj(cur)
    absv = np.abs(v)
    ang, slope = _voltvar(absv, *vv)
    sg = gmag * np.exp(1j * ang)
    return f - sg + sp, cur, sg, absv, slope


def _jacobian(v, y, cur, sg, absv, slope):
    m, n = v.shape
    eye = np.eye(n)
    cc = np.conj(cur)
    vy = v[:, :, None] * np.conj(y)[None, :, :]
    # pv injection derivative, only diagonal
    with np.errstate(divide="ignore", invalid="ignore"):
        dg = np.where(absv > 0, 1j * sg * slope / absv, 0.0)
    jx = vy + eye * (cc - dg * v.real)[:, :, None]
    jy = -1j * vy + eye * (1j * cc - dg * v.imag)[:, :, None]
    jac = np.empty((m, 2 * n, 2 * n))
    jac[:, :n, :n] = jx.real
    jac[:, :n, n:] = jy.real
    jac[:, n:, :n] = jx.imag
    jac[:, n:, n:] = jy.imag
    return jac


def _solve(jac, rhs):
    """Batched solve; returns (dx, singular_mask).

    A system counts as singular when LU meets an exactly zero pivot or the
    step is not finite, the same test the compiled kernel applies.
    """
    m = jac.shape[0]
    singular = np.zeros(m, dtype=bool)
    try:
        dx = np.linalg.solve(jac, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        dx = np.zeros_like(rhs)
        for s in range(m):
            try:
                dx[s] = np.linalg.solve(jac[s], rhs[s])
            except np.linalg.LinAlgError:
                singular[s] = True
    singular |= ~np.all(np.isfinite(dx), axis=1)
    dx[singular] = 0.0
    return dx, singular


def newton_batch(y, b, p, tan_theta, gmag, vv_x, vv_y, vv_ptr, v0, tol, max_iter, damping):
    y = np.asarray(y, dtype=complex)
    b = np.asarray(b, dtype=complex)
    p = np.atleast_2d(np.asarray(p, dtype=float))
    gmag = np.atleast_2d(np.asarray(gmag, dtype=float))
    v = np.array(np.atleast_2d(v0), dtype=complex)
    m, n = v.shape
    vv = (np.asarray(vv_x, float), np.asarray(vv_y, float), np.asarray(vv_ptr, np.int64))
    sp = p * (1.0 + 1j * np.asarray(tan_theta, dtype=float))

    mis, cur, sg, absv, slope = _mismatch(v, y, b, sp, gmag, vv)
    r2 = np.linalg.norm(mis, axis=1)
    rinf = np.abs(mis).max(axis=1) if n else np.zeros(m)
    iters = np.zeros(m, dtype=np.int64)
    status = np.full(m, -1, dtype=np.int64)

    while True:
        done = status >= 0
        conv = ~done & (rinf <= tol)
        status[conv] = 0
        out = ~done & ~conv & ((iters >= max_iter) | ~np.isfinite(rinf))
        status[out] = 1
        act = np.flatnonzero(status < 0)
        if act.size == 0:
            break
        va = v[act]
        jac = _jacobian(va, y, cur[act], sg[act], absv[act], slope[act])
        rhs = -np.concatenate([mis[act].real, mis[act].imag], axis=1)
        dx, singular = _solve(jac, rhs)
        status[act[singular]] = 2
        keep = ~singular
        act = act[keep]
        if act.size == 0:
            continue
        va = va[keep]
        dv = dx[keep, :n] + 1j * dx[keep, n:]
        lam = np.full(act.size, float(damping))
        pending = np.ones(act.size, dtype=bool)
        for h in range(MAX_HALVINGS):
            idx = np.flatnonzero(pending)
            tgt = act[idx]
            trial = va[idx] + lam[idx, None] * dv[idx]
            tm, tc, tsg, ta, tsl = _mismatch(trial, y, b, sp[tgt], gmag[tgt], vv)
            t2 = np.linalg.norm(tm, axis=1)
            ok = (t2 <= r2[tgt]) | (h == MAX_HALVINGS - 1)
            acc = tgt[ok]
            v[acc] = trial[ok]
            mis[acc] = tm[ok]
            cur[acc] = tc[ok]
            sg[acc] = tsg[ok]
            absv[acc] = ta[ok]
            slope[acc] = tsl[ok]
            r2[acc] = t2[ok]
            rinf[acc] = np.abs(tm[ok]).max(axis=1)
            iters[acc] += 1
            pending[idx[ok]] = False
            lam[idx[~ok]] *= 0.5
            if not pending.any():
                break
    return v, rinf, iters, status
