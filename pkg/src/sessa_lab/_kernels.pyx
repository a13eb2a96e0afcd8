# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: causal triangular solves and first-order linear scans.

Every function here has a numpy twin in ``_fallback`` with the same
signature and semantics; ``sessa_lab.kernels`` picks one at import.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def forward_substitution(const double[:, :, ::1] B, const double[:, :, ::1] f):
    """Solve ``(I - B) s = f`` for strictly lower-triangular ``B``, batched.

    B has shape (n, T, T); f and the result have shape (n, T, D).
    """
    cdef Py_ssize_t n = f.shape[0], T = f.shape[1], D = f.shape[2]
    cdef Py_ssize_t b, t, j, d
    cdef double w
    out = np.empty((n, T, D), dtype=np.float64)
    cdef double[:, :, ::1] s = out
    with nogil:
        for b in range(n):
            for t in range(T):
                for d in range(D):
                    s[b, t, d] = f[b, t, d]
                for j in range(t):
                    w = B[b, t, j]
                    if w != 0.0:
                        for d in range(D):
                            s[b, t, d] += w * s[b, j, d]
    return out


def backward_substitution(const double[:, :, ::1] B, const double[:, :, ::1] g):
    """Solve ``(I - B)^T x = g`` for strictly lower-triangular ``B``, batched."""
    cdef Py_ssize_t n = g.shape[0], T = g.shape[1], D = g.shape[2]
    cdef Py_ssize_t b, t, i, d
    cdef double w
    out = np.empty((n, T, D), dtype=np.float64)
    cdef double[:, :, ::1] x = out
    with nogil:
        for b in range(n):
            for t in range(T - 1, -1, -1):
                for d in range(D):
                    x[b, t, d] = g[b, t, d]
                for i in range(t + 1, T):
                    w = B[b, i, t]
                    if w != 0.0:
                        for d in range(D):
                            x[b, t, d] += w * x[b, i, d]
    return out


def linear_scan(const double[:, :, ::1] decay, const double[:, :, ::1] inject):
    """``h_t = decay_t * h_{t-1} + inject_t`` elementwise with ``h_{-1} = 0``.

    Arrays have shape (n, T, M).
    """
    cdef Py_ssize_t n = decay.shape[0], T = decay.shape[1], M = decay.shape[2]
    cdef Py_ssize_t b, t, m
    out = np.empty((n, T, M), dtype=np.float64)
    cdef double[:, :, ::1] h = out
    with nogil:
        for b in range(n):
            for m in range(M):
                h[b, 0, m] = inject[b, 0, m]
            for t in range(1, T):
                for m in range(M):
                    h[b, t, m] = decay[b, t, m] * h[b, t - 1, m] + inject[b, t, m]
    return out


def linear_scan_adjoint(
    const double[:, :, ::1] decay,
    const double[:, :, ::1] h,
    const double[:, :, ::1] g_h,
):
    """Reverse pass of ``linear_scan``; returns ``(g_decay, g_inject)``."""
    cdef Py_ssize_t n = decay.shape[0], T = decay.shape[1], M = decay.shape[2]
    cdef Py_ssize_t b, t, m
    g_decay_arr = np.zeros((n, T, M), dtype=np.float64)
    g_inject_arr = np.empty((n, T, M), dtype=np.float64)
    cdef double[:, :, ::1] g_decay = g_decay_arr
    cdef double[:, :, ::1] lam = g_inject_arr
    with nogil:
        for b in range(n):
            for m in range(M):
                lam[b, T - 1, m] = g_h[b, T - 1, m]
            for t in range(T - 2, -1, -1):
                for m in range(M):
                    lam[b, t, m] = g_h[b, t, m] + decay[b, t + 1, m] * lam[b, t + 1, m]
            for t in range(1, T):
                for m in range(M):
                    g_decay[b, t, m] = lam[b, t, m] * h[b, t - 1, m]
    return g_decay_arr, g_inject_arr


def uniform_impulse(double gamma, Py_ssize_t tau, Py_ssize_t T):
    """Impulse at ``tau`` through uniform strict-past routing with constant gain.

    Runs ``y_t = (gamma / t) * sum_{tau <= j < t} y_j`` with a running sum.
    """
    out = np.zeros(T, dtype=np.float64)
    cdef double[::1] y = out
    cdef double acc
    cdef Py_ssize_t t
    if tau >= T:
        return out
    y[tau] = 1.0
    acc = 1.0
    with nogil:
        for t in range(tau + 1, T):
            y[t] = gamma * acc / t
            acc += y[t]
    return out
