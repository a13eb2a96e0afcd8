"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``SESSA_LAB_PURE=1`` to force the numpy fallback (used by the
benchmark and by the equivalence tests).
"""
import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("SESSA_LAB_PURE") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _fallback


def _as3(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def forward_substitution(B, f):
    """Solve ``(I - B) s = f`` with ``B`` strictly lower triangular.

    Accepts a single system (``B``: T x T, ``f``: T x D) or a batch
    (n x T x T, n x T x D).
    """
    single = np.ndim(f) == 2
    B3, f3 = (_as3(B)[None], _as3(f)[None]) if single else (_as3(B), _as3(f))
    s = _impl.forward_substitution(B3, f3)
    return s[0] if single else s


def backward_substitution(B, g):
    """Solve ``(I - B)^T x = g``; the transpose solve used by adjoints."""
    single = np.ndim(g) == 2
    B3, g3 = (_as3(B)[None], _as3(g)[None]) if single else (_as3(B), _as3(g))
    x = _impl.backward_substitution(B3, g3)
    return x[0] if single else x


def linear_scan(decay, inject):
    """First-order elementwise recurrence over axis 1 of (n, T, ...) arrays."""
    shape = np.shape(inject)
    n, T = shape[0], shape[1]
    h = _impl.linear_scan(_as3(decay).reshape(n, T, -1), _as3(inject).reshape(n, T, -1))
    return h.reshape(shape)


def linear_scan_adjoint(decay, h, g_h):
    shape = np.shape(h)
    n, T = shape[0], shape[1]
    gd, gi = _impl.linear_scan_adjoint(
        _as3(decay).reshape(n, T, -1), _as3(h).reshape(n, T, -1), _as3(g_h).reshape(n, T, -1)
    )
    return gd.reshape(shape), gi.reshape(shape)


def uniform_impulse(gamma, tau, T):
    return _impl.uniform_impulse(float(gamma), int(tau), int(T))
