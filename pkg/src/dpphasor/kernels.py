"""Backend selection for the batched Newton kernel.

The compiled extension is used when it imports; setting the environment
variable ``DPPHASOR_PURE_PYTHON=1`` forces the numpy fallback. Both
backends share the same iteration and status codes (see ``_newton_py``).
"""

from __future__ import annotations

import os

import numpy as np

from dpphasor import _newton_py

try:
    if os.environ.get("DPPHASOR_PURE_PYTHON") == "1":
        raise ImportError("pure-python backend requested")
    from dpphasor import _newton_c
except ImportError:
    _newton_c = None

HAVE_COMPILED = _newton_c is not None
BACKEND = "cython" if HAVE_COMPILED else "python"

STATUS_CONVERGED = 0
STATUS_MAX_ITER = 1
STATUS_SINGULAR = 2


def _newton_compiled(y, b, p, tan_theta, gmag, vv_x, vv_y, vv_ptr, v0, tol, max_iter, damping):
    y = np.asarray(y, dtype=complex)
    b = np.asarray(b, dtype=complex)
    v0 = np.atleast_2d(np.asarray(v0, dtype=complex))
    m, n = v0.shape
    p = np.broadcast_to(np.atleast_2d(np.asarray(p, dtype=float)), (m, n))
    gmag = np.broadcast_to(np.atleast_2d(np.asarray(gmag, dtype=float)), (m, n))
    tan_theta = np.asarray(tan_theta, dtype=float)
    vr = np.ascontiguousarray(v0.real, dtype=float)
    vi = np.ascontiguousarray(v0.imag, dtype=float)
    res, its, sts = _newton_c.newton_batch_real(
        np.ascontiguousarray(y.real),
        np.ascontiguousarray(y.imag),
        np.ascontiguousarray(b.real),
        np.ascontiguousarray(b.imag),
        np.ascontiguousarray(p, dtype=float),
        np.ascontiguousarray(p * tan_theta, dtype=float),
        np.ascontiguousarray(gmag, dtype=float),
        np.ascontiguousarray(vv_x, dtype=float),
        np.ascontiguousarray(vv_y, dtype=float),
        np.ascontiguousarray(vv_ptr, dtype=np.int64),
        vr,
        vi,
        float(tol),
        int(max_iter),
        float(damping),
    )
    return vr + 1j * vi, res, its, sts


def newton_batch(*args, backend: str | None = None):
    """Solve a batch of power-flow systems sharing one network.

    Arguments: ``y, b, p, tan_theta, gmag, vv_x, vv_y, vv_ptr, v0, tol,
    max_iter, damping`` with ``p``, ``gmag`` and ``v0`` of shape ``(m, n)``.
    Returns ``(v, residual_inf, iterations, status)``.
    """
    which = backend or BACKEND
    if which == "cython":
        if _newton_c is None:
            raise RuntimeError("compiled kernel not available")
        return _newton_compiled(*args)
    if which == "python":
        return _newton_py.newton_batch(*args)
    raise ValueError(f"unknown backend {which!r}")
