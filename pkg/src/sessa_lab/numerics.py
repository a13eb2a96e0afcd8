"""Dense real-array primitives shared by every other module.

Activations, rotary embeddings, stable softmax, Gamma-function ratios and
decay-law fits. Everything works in float64.
"""
from dataclasses import dataclass
import math

import numpy as np
from scipy.special import ndtr

from .errors import DomainError, FitDomainError, InputError

DEFAULT_ROPE_BASE = 10000.0
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_finite(a, name="array"):
    """Return ``a`` as a float64 array, rejecting NaN/Inf entries."""
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite entries")
    return arr


# --------------------------------------------------------------------------
# softmax
# --------------------------------------------------------------------------

def softmax_row(logits, scale=1.0):
    """Softmax of ``scale * logits`` with max subtraction."""
    if not scale > 0:
        raise DomainError(f"softmax scale must be positive, got {scale}")
    z = scale * as_finite(logits, "logits")
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def masked_softmax(logits, mask):
    """Row softmax over entries where ``mask`` is True, zero elsewhere.

    Rows with no visible entry come back as all zeros (the convention for
    the first row of strict-past attention).
    """
    z = np.where(mask, logits, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(z - zmax), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)


def softmax_backward(probs, g_probs):
    """Pull a cotangent through a row softmax: ``p * (g - <g, p>)``."""
    return probs * (g_probs - np.sum(g_probs * probs, axis=-1, keepdims=True))


def causal_mask(T, strict=False):
    """Boolean T x T mask of visible positions (j <= t, or j < t if strict)."""
    return np.tri(T, T, -1 if strict else 0, dtype=bool)


# --------------------------------------------------------------------------
# GELU (exact Gaussian-CDF form)
# --------------------------------------------------------------------------

def gelu(x):
    """``x * Phi(x)`` with the exact normal CDF."""
    x = np.asarray(x, dtype=np.float64)
    return x * ndtr(x)


def gelu_prime(x):
    """Derivative ``Phi(x) + x * phi(x)``."""
    x = np.asarray(x, dtype=np.float64)
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


# --------------------------------------------------------------------------
# rotary position embedding
# --------------------------------------------------------------------------

def rope_frequencies(d_k, base=DEFAULT_ROPE_BASE):
    if d_k % 2:
        raise InputError(f"RoPE needs an even width, got d_k={d_k}")
    if not base > 1:
        raise DomainError(f"RoPE base must exceed 1, got {base}")
    return base ** (-2.0 * np.arange(d_k // 2) / d_k)


def rope_rotate(v, position, base=DEFAULT_ROPE_BASE):
    """Rotate consecutive coordinate pairs ``(2r, 2r+1)`` by ``omega_r * position``.

    ``omega_r = base**(-2r/d_k)``, so the first pair turns at unit frequency.
    """
    v = np.asarray(v, dtype=np.float64)
    omega = rope_frequencies(v.shape[-1], base)
    ang = omega * position
    c, s = np.cos(ang), np.sin(ang)
    x, y = v[..., 0::2], v[..., 1::2]
    out = np.empty_like(v)
    out[..., 0::2] = x * c - y * s
    out[..., 1::2] = x * s + y * c
    return out


def rope_apply(X, base=DEFAULT_ROPE_BASE, inverse=False):
    """Apply RoPE to the rows of ``X`` (..., T, d_k) at positions 0..T-1.

    ``inverse=True`` rotates backwards, which is the transpose map used when
    pulling gradients through the rotation.
    """
    X = np.asarray(X, dtype=np.float64)
    T, d_k = X.shape[-2], X.shape[-1]
    omega = rope_frequencies(d_k, base)
    ang = np.arange(T, dtype=np.float64)[:, None] * omega[None, :]
    c, s = np.cos(ang), np.sin(ang)
    if inverse:
        s = -s
    x, y = X[..., 0::2], X[..., 1::2]
    out = np.empty_like(X)
    out[..., 0::2] = x * c - y * s
    out[..., 1::2] = x * s + y * c
    return out


# --------------------------------------------------------------------------
# Gamma-function ratios
# --------------------------------------------------------------------------

# B_{2k} / (2k (2k-1)) for k = 1..7
_STIRLING = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)
_SHIFT_TO = 12.0


def _stirling_tail(z):
    zi = 1.0 / z
    zi2 = zi * zi
    acc = np.zeros_like(z)
    for c in reversed(_STIRLING):
        acc = acc * zi2 + c
    return acc * zi


def log_gamma_quotient(x, a, b):
    """``log(Gamma(x + a) / Gamma(x + b))`` without catastrophic cancellation.

    Both arguments are shifted up by the recurrence ``Gamma(z+1) = z Gamma(z)``
    until they exceed 12, then the Stirling series difference is evaluated in
    a form where the large ``z log z`` terms cancel analytically.
    Requires ``x + a > 0`` and ``x + b > 0``.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x, a, b = np.broadcast_arrays(x, a, b)
    z1 = np.array(x + a, dtype=np.float64)
    z2 = np.array(x + b, dtype=np.float64)
    if np.any(z1 <= 0) or np.any(z2 <= 0):
        raise DomainError("Gamma quotient needs positive arguments")
    corr = np.zeros_like(z1)
    while True:
        low = np.minimum(z1, z2) < _SHIFT_TO
        if not np.any(low):
            break
        corr = np.where(low, corr + np.log(z2) - np.log(z1), corr)
        z1 = np.where(low, z1 + 1.0, z1)
        z2 = np.where(low, z2 + 1.0, z2)
    d = a - b
    main = (z1 - 0.5) * np.log1p(d / z2) + d * np.log(z2) - d
    out = main + _stirling_tail(z1) - _stirling_tail(z2) + corr
    return out if out.ndim else float(out)


def gamma_quotient(x, a, b):
    """``Gamma(x + a) / Gamma(x + b)``."""
    return np.exp(log_gamma_quotient(x, a, b))


def log_gamma_ratio(t, gamma):
    """``Gamma(t + gamma) / Gamma(t + 1)`` evaluated through log-Gamma differences.

    Defined for ``t >= 1`` and ``0 < gamma <= 1``; stays finite for t up to
    at least 1e6.
    """
    t = np.asarray(t, dtype=np.float64)
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(t < 1):
        raise DomainError("log_gamma_ratio needs t >= 1")
    if np.any(g <= 0) or np.any(g > 1):
        raise DomainError("log_gamma_ratio needs 0 < gamma <= 1")
    return gamma_quotient(t, g, 1.0)


# --------------------------------------------------------------------------
# decay-law fits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    """Least-squares decay law over an integer lag window.

    For a power law ``exponent`` is the log-log slope; for an exponential it
    is the rate ``c`` in ``y = e^{intercept} e^{c l}``. ``max_residual`` is
    the largest absolute log-space residual inside the window.
    """

    exponent: float
    intercept: float
    window: tuple
    max_residual: float
    kind: str = "power"

    def predict(self, lags):
        lags = np.asarray(lags, dtype=np.float64)
        x = np.log(lags) if self.kind == "power" else lags
        return np.exp(self.intercept + self.exponent * x)


def default_window(lag_max, lag_min=1):
    """Top half of the available lags on a log scale: geometric midpoint to max."""
    lo = int(math.ceil(math.sqrt(lag_min * lag_max)))
    return (max(lo, lag_min), int(lag_max))


def _series_arrays(series):
    # ImpulseSeries-like objects expose lags and values; plain arrays are indexed by lag
    if hasattr(series, "lags") and hasattr(series, "tail"):
        return series.lags(), series.tail()
    y = np.asarray(series, dtype=np.float64)
    return np.arange(y.shape[0], dtype=np.float64), y


def _fit(series, window, kind):
    lo, hi = int(window[0]), int(window[1])
    if lo < 1 or hi <= lo:
        raise DomainError(f"bad fit window {window}")
    lags, vals = _series_arrays(series)
    sel = (lags >= lo) & (lags <= hi)
    if sel.sum() < 8:
        raise DomainError(f"fit window {window} holds fewer than 8 lags")
    x, y = lags[sel], vals[sel]
    if np.any(~(y > 0)):
        bad = int(x[np.argmax(~(y > 0))])
        raise FitDomainError(f"non-positive value at lag {bad}")
    ly = np.log(y)
    xx = np.log(x) if kind == "power" else x
    A = np.column_stack([xx, np.ones_like(xx)])
    (slope, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = np.abs(ly - (slope * xx + icpt))
    return DecayFit(float(slope), float(icpt), (lo, hi), float(resid.max()), kind)


def fit_power_law(series, window):
    """OLS fit of ``log y = exponent * log l + intercept`` over the window."""
    return _fit(series, window, "power")


def fit_exponential(series, window):
    """OLS fit of ``log y = rate * l + intercept`` over the window."""
    return _fit(series, window, "exponential")
