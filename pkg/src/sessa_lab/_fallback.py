"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def forward_substitution(B, f):
    s = np.array(f, dtype=np.float64, copy=True)
    T = s.shape[1]
    for t in range(1, T):
        s[:, t] += np.einsum("bj,bjd->bd", B[:, t, :t], s[:, :t])
    return s


def backward_substitution(B, g):
    x = np.array(g, dtype=np.float64, copy=True)
    T = x.shape[1]
    for t in range(T - 2, -1, -1):
        x[:, t] += np.einsum("bi,bid->bd", B[:, t + 1:, t], x[:, t + 1:])
    return x


def linear_scan(decay, inject):
    h = np.empty_like(inject, dtype=np.float64)
    h[:, 0] = inject[:, 0]
    for t in range(1, h.shape[1]):
        h[:, t] = decay[:, t] * h[:, t - 1] + inject[:, t]
    return h


def linear_scan_adjoint(decay, h, g_h):
    T = h.shape[1]
    lam = np.empty_like(g_h, dtype=np.float64)
    lam[:, T - 1] = g_h[:, T - 1]
    for t in range(T - 2, -1, -1):
        lam[:, t] = g_h[:, t] + decay[:, t + 1] * lam[:, t + 1]
    g_decay = np.zeros_like(lam)
    g_decay[:, 1:] = lam[:, 1:] * h[:, :-1]
    return g_decay, lam


def uniform_impulse(gamma, tau, T):
    y = np.zeros(T, dtype=np.float64)
    if tau >= T:
        return y
    y[tau] = 1.0
    acc = 1.0
    for t in range(tau + 1, T):
        y[t] = gamma * acc / t
        acc += y[t]
    return y
