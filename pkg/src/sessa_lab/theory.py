"""Scalar feedback recursions, closed forms and decay-envelope checkers.

The central object is the impulse response of the scalar feedback recursion

    y_t = f_t + gamma_t * sum_{j<t} alpha_{t,j} y_j,    f = e_tau,

whose tail in the lag ``l = t - tau`` is polynomial under diffuse routing.
"""
from dataclasses import dataclass, field
import csv
import math

import numpy as np

from . import kernels
from .errors import CheckFailure, DomainError, InputError, RegimeError
from .numerics import (
    DecayFit,
    default_window,
    fit_power_law,
    log_gamma_quotient,
)

# relative slack for floating-point roundoff in envelope comparisons
ROUNDOFF = 1e-12


# --------------------------------------------------------------------------
# routing specifications
# --------------------------------------------------------------------------

@dataclass
class RoutingSpec:
    """Feedback routing for the scalar recursion.

    ``alpha_kind``: ``uniform`` (``alpha_{t,j} = 1/t``), ``explicit``
    (a T x T matrix in ``alpha``) or ``envelope`` (only ``c2`` known).
    ``gamma_kind``: ``constant`` (``gamma``), ``explicit`` (per-step
    ``gamma``) or ``bound`` (only ``gamma_max`` known).
    """

    alpha_kind: str = "uniform"
    gamma_kind: str = "constant"
    alpha: np.ndarray = None
    gamma: object = 0.5
    c2: float = 1.0
    gamma_max: float = None

    def __post_init__(self):
        if self.alpha_kind not in ("uniform", "explicit", "envelope"):
            raise InputError(f"unknown alpha_kind {self.alpha_kind!r}")
        if self.gamma_kind not in ("constant", "explicit", "bound"):
            raise InputError(f"unknown gamma_kind {self.gamma_kind!r}")
        if self.alpha_kind == "explicit":
            a = np.asarray(self.alpha, dtype=np.float64)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise InputError("explicit alpha must be a square matrix")
            if np.any(a < 0) or np.any(np.triu(a) != 0):
                raise InputError("explicit alpha must be non-negative and strictly lower triangular")
            if np.any(a.sum(axis=1) > 1 + 1e-12):
                raise InputError("explicit alpha rows must sum to at most 1")
            self.alpha = a
        if self.gamma_kind == "explicit":
            self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if self.gamma_max is None:
            if self.gamma_kind == "bound":
                raise InputError("gamma_kind='bound' needs gamma_max")
            self.gamma_max = float(np.max(np.abs(self.gamma)))
        if not 0 <= self.gamma_max < 1:
            raise DomainError(f"gamma_max must lie in [0, 1), got {self.gamma_max}")
        if self.alpha_kind == "uniform":
            self.c2 = 1.0
        elif self.alpha_kind == "explicit":
            t = np.arange(self.alpha.shape[0], dtype=np.float64)
            self.c2 = float(np.max(self.alpha[1:] * t[1:, None], initial=0.0))

    @classmethod
    def uniform(cls, gamma):
        return cls("uniform", "constant", gamma=float(gamma))

    @classmethod
    def explicit(cls, alpha, gamma):
        kind = "constant" if np.ndim(gamma) == 0 else "explicit"
        return cls("explicit", kind, alpha=alpha, gamma=gamma if kind == "explicit" else float(gamma))

    @property
    def eta(self):
        return self.gamma_max * self.c2

    @property
    def beta_tail(self):
        return 1.0 - self.eta

    @property
    def subcritical(self):
        return self.eta < 1

    def gains(self, T):
        if self.gamma_kind == "explicit":
            g = self.gamma
            if g.shape[0] < T:
                raise InputError(f"need {T} gains, spec has {g.shape[0]}")
            return g[:T]
        if self.gamma_kind == "bound":
            return np.full(T, self.gamma_max)
        return np.full(T, float(self.gamma))

    def routing(self, T):
        """Dense T x T feedback matrix ``B = diag(gamma) alpha``."""
        if self.alpha_kind == "uniform":
            t = np.arange(T, dtype=np.float64)
            a = np.tril(np.ones((T, T)), -1) / np.maximum(t, 1.0)[:, None]
        elif self.alpha_kind == "explicit":
            if self.alpha.shape[0] < T:
                raise InputError(f"explicit alpha covers {self.alpha.shape[0]} < {T} steps")
            a = self.alpha[:T, :T]
        else:
            raise InputError("an envelope-only spec has no concrete routing; sample one first")
        return self.gains(T)[:, None] * a


def capped_rows(weights, c2):
    """Normalise non-negative strictly-lower rows to sum 1 with ``alpha_{t,j} <= c2/t``.

    Mass above the cap is redistributed proportionally among the uncapped
    entries (water filling), i.e. row ``t`` becomes ``min(c2/t, lam_t W)``.
    ``lam_t`` is found exactly by sorting the row. Needs ``c2 >= 1`` so the
    cap is feasible.
    """
    if c2 < 1:
        raise DomainError("row caps c2/t with c2 < 1 cannot hold a unit row sum")
    W = np.tril(np.asarray(weights, dtype=np.float64), -1)
    T = W.shape[0]
    cap = c2 / np.maximum(np.arange(T, dtype=np.float64), 1.0)[:, None]
    Ws = -np.sort(-W, axis=1)                                   # descending per row
    suffix = np.cumsum(Ws[:, ::-1], axis=1)[:, ::-1]           # sum_{i>=k} w_(i)
    k = np.arange(T, dtype=np.float64)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (1.0 - k * cap) / suffix
        ok = (lam * Ws <= cap) & (suffix > 0)
    # first k whose largest free weight stays under the cap
    first = np.argmax(ok, axis=1)
    lam_row = lam[np.arange(T), first][:, None]
    lam_row[~ok.any(axis=1)] = 0.0
    P = np.minimum(cap, lam_row * W)
    P[0] = 0.0
    return np.where(np.tri(T, T, -1, dtype=bool), P, 0.0)


def random_admissible_spec(rng, T, c2, gamma_max, signed=True):
    """A random routing obeying ``alpha_{t,j} <= c2/t`` and ``|gamma_t| <= gamma_max``.

    Row weights are log-normal with a per-spec spread, so specs range from
    nearly uniform to cap-saturated; gains are either the extreme value or
    random within the bound.
    """
    spread = rng.uniform(0.0, 4.0)
    W = np.exp(spread * rng.standard_normal((T, T)))
    if rng.random() < 0.5:
        # favour recent positions
        W *= np.exp(rng.uniform(0, 3) * np.arange(T)[None, :] / T)
    alpha = capped_rows(W, c2)
    if rng.random() < 0.5:
        gamma = np.full(T, gamma_max)
    else:
        lo = -gamma_max if signed else 0.0
        gamma = rng.uniform(lo, gamma_max, T)
    spec = RoutingSpec("explicit", "explicit", alpha=alpha, gamma=gamma, gamma_max=gamma_max)
    spec.c2 = max(spec.c2, 0.0)
    return spec


# --------------------------------------------------------------------------
# impulse responses
# --------------------------------------------------------------------------

@dataclass
class ImpulseSeries:
    """Impulse influence ``y_{tau+l}`` for ``l = 0 .. T-1-tau``."""

    tau: int
    values: np.ndarray
    beta_tail: float = None

    def lags(self):
        return np.arange(self.values.shape[0], dtype=np.float64)

    def tail(self):
        return self.values

    def at(self, lag):
        return self.values[lag]

    def full(self):
        """Values on the absolute time axis, zeros before the source."""
        return np.concatenate([np.zeros(self.tau), self.values])


def impulse_response(spec, tau, T):
    """Run the scalar feedback recursion from a unit impulse at ``tau``."""
    tau, T = int(tau), int(T)
    if not 0 <= tau < T:
        raise InputError(f"need 0 <= tau < T, got tau={tau}, T={T}")
    beta = spec.beta_tail if spec.subcritical else None
    if spec.alpha_kind == "uniform" and spec.gamma_kind == "constant":
        y = kernels.uniform_impulse(float(spec.gamma), tau, T)
    else:
        B = spec.routing(T)
        f = np.zeros((T, 1))
        f[tau, 0] = 1.0
        y = kernels.forward_substitution(B, f)[:, 0]
    return ImpulseSeries(tau, np.array(y[tau:]), beta)


def uniform_closed_form(gamma, tau, ell):
    """Exact impulse value ``y_{tau+l}`` under uniform routing and constant gain.

    ``gamma Gamma(tau+1)/Gamma(tau+1+gamma) * Gamma(tau+l+gamma)/Gamma(tau+l+1)``.
    Vectorised over ``tau`` and ``ell``.
    """
    if not 0 < gamma < 1:
        raise DomainError(f"closed form needs 0 < gamma < 1, got {gamma}")
    tau = np.asarray(tau, dtype=np.float64)
    ell = np.asarray(ell, dtype=np.float64)
    if np.any(ell < 1) or np.any(tau < 0):
        raise DomainError("closed form needs lag >= 1 and tau >= 0")
    logv = log_gamma_quotient(tau + ell, gamma, 1.0) - log_gamma_quotient(tau + 1.0, gamma, 0.0)
    out = gamma * np.exp(logv)
    return float(out) if np.ndim(out) == 0 else out


def gautschi_bracket(t, gamma):
    """``((t+1)^{gamma-1}, t^{gamma-1})``, the bracket for ``Gamma(t+gamma)/Gamma(t+1)``."""
    t = np.asarray(t, dtype=np.float64)
    return (t + 1.0) ** (gamma - 1.0), t ** (gamma - 1.0)


# --------------------------------------------------------------------------
# envelope checks
# --------------------------------------------------------------------------

@dataclass
class EnvelopeReport:
    """Outcome of comparing a series with an envelope lag by lag."""

    name: str
    lags: np.ndarray
    values: np.ndarray
    envelope: np.ndarray
    violated: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def ok(self):
        return not bool(np.any(self.violated))

    @property
    def first_violation(self):
        idx = np.flatnonzero(self.violated)
        return int(self.lags[idx[0]]) if idx.size else None

    def raise_if_failed(self):
        if not self.ok:
            raise CheckFailure(f"{self.name}: envelope violated at lag {self.first_violation}", self)
        return self

    def rows(self):
        for lag, v, e, bad in zip(self.lags, self.values, self.envelope, self.violated):
            yield int(lag), float(v), float(e), bool(bad)


def write_envelope_csv(path_or_file, report):
    """Columns ``lag, value, envelope, violated``."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh)
        w.writerow(["lag", "value", "envelope", "violated"])
        for lag, v, e, bad in report.rows():
            w.writerow([lag, repr(v), repr(e), int(bad)])
    finally:
        if own:
            fh.close()


@dataclass
class PolyDecayReport(EnvelopeReport):
    @property
    def C_used(self):
        return self.params["C"]

    @property
    def max_violation(self):
        """Largest ``|y_l| l^beta / C``; at most 1 when the bound holds."""
        return self.params["max_ratio"]


def poly_decay_constant(beta):
    """``(1-beta) e^{1-beta}``."""
    return (1.0 - beta) * math.exp(1.0 - beta)


def poly_decay_check(series, beta=None, C=None, strict=True):
    """Check ``|y_{tau+l}| <= C l^{-beta}`` for every lag ``l >= 1``.

    ``beta`` defaults to the series' ``beta_tail`` and ``C`` to
    ``(1-beta) e^{1-beta}``. Besides the verdict the report carries the
    empirical sharp constant ``max_l |y_l| l^beta``.
    """
    beta = series.beta_tail if beta is None else beta
    if beta is None or not 0 < beta <= 1:
        raise RegimeError("envelope bounds need a subcritical spec (0 < beta_tail <= 1)")
    C = poly_decay_constant(beta) if C is None else float(C)
    lags = series.lags()[1:]
    vals = np.abs(series.tail()[1:])
    env = C * lags ** (-beta)
    violated = vals > env * (1 + ROUNDOFF) + 1e-300
    scaled = vals * lags ** beta
    ratio = float(np.max(scaled) / C) if C > 0 else (0.0 if not np.any(vals) else math.inf)
    rep = PolyDecayReport(
        "poly_decay", lags, vals, env, violated,
        {"C": C, "beta": beta, "max_ratio": ratio if vals.size else 0.0,
         "sharp_constant": float(np.max(scaled, initial=0.0))},
    )
    return rep.raise_if_failed() if strict else rep


@dataclass
class TwoSidedReport:
    gamma: float
    tau_max: int
    ell_max: int
    c_minus: float
    c_plus: float
    min_ratio: float
    max_ratio: float
    exponents: list
    ok: bool
    first_violation: tuple = None

    def raise_if_failed(self):
        if not self.ok:
            raise CheckFailure(f"two-sided envelope violated at (tau, lag) = {self.first_violation}", self)
        return self


def two_sided_constants(gamma, tau_max):
    """``(c_minus, c_plus)`` for sources ``0 <= tau <= tau_max``.

    With ``a_tau = gamma Gamma(tau+1)/Gamma(tau+1+gamma)`` the bracket gives
    ``a_tau (tau+l+1)^{-beta} <= y_{tau+l} <= a_tau l^{-beta}``; since
    ``tau+l+1 <= (tau_max+2) l`` one may take ``c_plus = max a_tau`` and
    ``c_minus = min a_tau * (tau_max+2)^{-beta}``.
    """
    beta = 1.0 - gamma
    taus = np.arange(tau_max + 1, dtype=np.float64)
    a = gamma * np.exp(-log_gamma_quotient(taus + 1.0, gamma, 0.0))
    return float(a.min() * (tau_max + 2.0) ** (-beta)), float(a.max())


def two_sided_tail_check(gamma, tau_max, ell_max, fit_window=None, strict=True):
    """Uniform two-sided envelope ``c- l^{-beta} <= y_{tau+l} <= c+ l^{-beta}``.

    Also fits each source's tail exponent (window defaults to the top half
    of the lags on a log scale; skipped when fewer than 8 lags fit).
    """
    if not 0 < gamma < 1:
        raise DomainError(f"two-sided check needs 0 < gamma < 1, got {gamma}")
    beta = 1.0 - gamma
    cm, cp = two_sided_constants(gamma, tau_max)
    lags = np.arange(1, ell_max + 1, dtype=np.float64)
    lo_r, hi_r, first, exps = math.inf, 0.0, None, []
    win = fit_window or default_window(ell_max)
    for tau in range(tau_max + 1):
        y = impulse_response(RoutingSpec.uniform(gamma), tau, tau + ell_max + 1).tail()[1:]
        r = y * lags ** beta
        lo_r, hi_r = min(lo_r, r.min()), max(hi_r, r.max())
        bad = (r < cm * (1 - ROUNDOFF)) | (r > cp * (1 + ROUNDOFF))
        if first is None and bad.any():
            first = (tau, int(lags[np.argmax(bad)]))
        if win[1] - win[0] >= 8:
            exps.append(fit_power_law(ImpulseSeries(tau, np.concatenate([[1.0], y])), win).exponent)
    rep = TwoSidedReport(gamma, tau_max, ell_max, cm, cp, float(lo_r), float(hi_r), exps,
                         first is None, first)
    return rep.raise_if_failed() if strict else rep


# --------------------------------------------------------------------------
# resolvent kernels
# --------------------------------------------------------------------------

def resolvent_kernel(B):
    """``Theta = (I - B)^{-1}`` for strictly lower-triangular ``B``."""
    Bm = B.entries if hasattr(B, "entries") else np.asarray(B, dtype=np.float64)
    T = Bm.shape[-1]
    if np.any(np.triu(Bm) != 0):
        raise InputError("resolvent needs a strictly lower-triangular matrix")
    return kernels.forward_substitution(Bm, np.eye(T))


def uniform_resolvent(gamma, T):
    """Closed form of the uniform-routing resolvent (``i > k`` entries).

    ``Theta_{i,k} = gamma Gamma(k+1)/Gamma(k+1+gamma) Gamma(i+gamma)/Gamma(i+1)``.
    """
    i = np.arange(T, dtype=np.float64)
    right = -log_gamma_quotient(i + 1.0, gamma, 0.0)
    left = log_gamma_quotient(np.maximum(i, 1.0), gamma, 1.0)
    Th = gamma * np.exp(left[:, None] + right[None, :])
    Th = np.tril(Th, -1) + np.eye(T)
    return Th


def resolvent_factor_bounds(gamma):
    """Constants with ``c- <= Theta_{i,k} (k+1)^gamma (i+1)^beta <= c+`` for ``i > k``.

    From ``Gamma(x+s)/Gamma(x) <= x^s`` and Wendel's lower bracket one gets
    ``c- = gamma`` and ``c+ = gamma * 2^{1-gamma} * 2^{beta} = gamma * 4^{1-gamma}``.
    """
    return gamma, gamma * 4.0 ** (1.0 - gamma)


# --------------------------------------------------------------------------
# heavy-tail convolutions
# --------------------------------------------------------------------------

def heavy_tail_convolution(beta, k, n_max):
    """k-fold positive-lag convolution of ``n^{-beta}``, indexed by ``n = 0..n_max``.

    ``(a*b)(n) = sum_{m=1}^{n-1} a(m) b(n-m)``; entries with ``n < k`` are zero.
    """
    if not 0 < beta < 1:
        raise DomainError(f"need 0 < beta < 1, got {beta}")
    if k < 1 or n_max < k:
        raise DomainError(f"need k >= 1 and n_max >= k, got k={k}, n_max={n_max}")
    n = np.arange(n_max + 1, dtype=np.float64)
    f = np.zeros(n_max + 1)
    f[1:] = n[1:] ** (-beta)
    out = f
    for _ in range(k - 1):
        out = np.convolve(out, f)[: n_max + 1]
    return out


def convolution_exponent(beta, k):
    return k * (1.0 - beta) - 1.0


def heavy_tail_asymptote(beta, k, n):
    """Leading term ``Gamma(1-beta)^k / Gamma(k(1-beta)) n^{k(1-beta)-1}``."""
    g = 1.0 - beta
    logc = k * math.lgamma(g) - math.lgamma(k * g)
    return np.exp(logc) * np.asarray(n, dtype=np.float64) ** (k * g - 1.0)


# --------------------------------------------------------------------------
# transport-kernel exponents
# --------------------------------------------------------------------------

@dataclass
class TransportReport:
    k: int
    beta: float
    tau_star: int
    H: int
    nu: float
    fitted_nu: float
    fit: DecayFit
    c_minus: float
    margin: np.ndarray
    target: np.ndarray
    margin_ok: bool
    first_failing_lag: int = None

    @property
    def profile(self):
        if abs(self.nu) < 1e-12:
            return "frozen"
        return "increasing" if self.nu > 0 else "decaying"


def transport_stack(k, beta, tau_star, H, a=1.0, diag=1.0, gain=1.0, c0=0.01):
    """Compose selector and ``k`` kernel layers; return the full T x T transport.

    Each layer is ``D(i) 1[i=j] + a (i+1)^{-beta} 1[j<i]``; the selector is
    diagonal with ``gain`` at ``tau_star`` and ``c0/(H+1)`` elsewhere.
    """
    if not 0.5 <= gain <= 2:
        raise DomainError("selector gain must lie in [1/2, 2]")
    T = tau_star + H + 1
    i = np.arange(T, dtype=np.float64)
    layer = np.tril(np.ones((T, T)), -1) * (a * (i + 1.0) ** (-beta))[:, None]
    layer[np.diag_indices(T)] = diag
    sel = np.full(T, c0 / (H + 1.0))
    sel[tau_star] = gain
    M = np.diag(sel)
    for _ in range(k):
        M = layer @ M
    return M


def transport_exponent_check(k, beta, tau_star=0, H=512, c0=0.01, fit_window=None, c_minus=None):
    """Fit the selected-channel transport exponent and check the selective margin.

    The margin is the target ``T(tau*+l, tau*)`` minus the total absolute
    transport from all competitor sources. ``c_minus`` defaults to half the
    smallest value of ``target (1+l)^{-nu}`` over the horizon, so the margin
    check asserts that competitors never eat more than half of the
    balanced-path lower envelope.
    """
    if k < 1 or H < k:
        raise DomainError("need k >= 1 and H >= k")
    if not 0 < beta < 1:
        raise DomainError("need 0 < beta < 1")
    nu = convolution_exponent(beta, k)
    M = transport_stack(k, beta, tau_star, H, c0=c0)
    rows = M[tau_star + 1:]
    target = rows[:, tau_star]
    competitors = np.abs(rows).sum(axis=1) - np.abs(target)
    margin = target - competitors
    lag = np.arange(1, H + 1, dtype=np.float64)
    if c_minus is None:
        c_minus = 0.5 * float(np.min(target * (1.0 + lag) ** (-nu)))
    bad = margin < c_minus * (1.0 + lag) ** nu
    series = ImpulseSeries(tau_star, np.concatenate([[M[tau_star, tau_star]], target]))
    fit = fit_power_law(series, fit_window or default_window(H))
    first = int(lag[np.argmax(bad)]) if bad.any() else None
    return TransportReport(k, beta, tau_star, H, nu, fit.exponent, fit, c_minus, margin,
                           target, not bad.any(), first)


# --------------------------------------------------------------------------
# deep path sums
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelSpec:
    """Scalar lag kernel for one layer.

    ``harmonic``: ``a/(t+1)``; ``exp``: ``a e^{-rate (t-tau)}``;
    ``heavy``: ``a (t-tau)^{-beta} (1 + log(1 + t - tau))``.
    """

    kind: str = "harmonic"
    a: float = 1.0
    rate: float = 1.0
    beta: float = 0.5

    def matrix(self, T):
        t = np.arange(T, dtype=np.float64)[:, None]
        tau = np.arange(T, dtype=np.float64)[None, :]
        lag = np.maximum(t - tau, 1.0)
        if self.kind == "harmonic":
            K = self.a / (t + 1.0) * np.ones_like(tau)
        elif self.kind == "exp":
            K = self.a * np.exp(-self.rate * lag)
        elif self.kind == "heavy":
            K = self.a * lag ** (-self.beta) * (1.0 + np.log1p(lag))
        else:
            raise InputError(f"unknown kernel kind {self.kind!r}")
        return np.tril(K, -1)


@dataclass
class PathSumBound:
    value: float
    harmonic_bound: float = None


def nested_harmonic_bound(t, k):
    """``(1/(t+1)) H_t^{k-1}/(k-1)!``."""
    Ht = float(np.sum(1.0 / np.arange(1, t + 1))) if t > 0 else 0.0
    return Ht ** (k - 1) / math.factorial(k - 1) / (t + 1.0)


def deep_path_sum_bound(d, lam, kernels_, t, tau):
    """Exact path-sum envelope for a stack of layers with one-block envelopes
    ``d_p 1[t=tau] + lam_p K_p(t, tau) 1[tau<t]``.

    The sum over layer subsets and ordered jump times equals the ``(t, tau)``
    entry of ``prod_p (d_p I + lam_p K_p)`` (layer 1 applied first), which is
    evaluated by dynamic programming over the time window ``[tau, t]``.
    When every kernel is harmonic the closed nested-harmonic majorant
    ``sum_k e_k`` is returned alongside.
    """
    n = len(d)
    if not (len(lam) == len(kernels_) == n):
        raise InputError("d, lam and kernels must have one entry per layer")
    if n < 1 or n > 6:
        raise DomainError("path sums support 1..6 layers")
    if not t > tau >= 0:
        raise DomainError("need t > tau >= 0")
    T = t + 1
    v = np.zeros(T)
    v[tau] = 1.0
    for dp, lp, kp in zip(d, lam, kernels_):
        K = kp.matrix(T)
        v = dp * v + lp * (K @ v)
    value = float(v[t])
    hb = None
    if all(kp.kind == "harmonic" for kp in kernels_):
        # sum over jump-layer subsets of prod(d off-subset) prod(lam a on-subset) H^k bound
        poly = np.zeros(n + 1)
        poly[0] = 1.0
        for dp, lp, kp in zip(d, lam, kernels_):
            nxt = dp * poly
            nxt[1:] += lp * kp.a * poly[:-1]
            poly = nxt
        hb = float(sum(poly[k] * nested_harmonic_bound(t, k) for k in range(1, n + 1)))
    return PathSumBound(value, hb)


def brute_force_path_sum(d, lam, kernels_, t, tau):
    """Enumerate layer subsets and jump times directly (small cases only)."""
    from itertools import combinations

    n = len(d)
    mats = [kp.matrix(t + 1) for kp in kernels_]
    total = 0.0
    for k in range(1, n + 1):
        for layers in combinations(range(n), k):
            dprod = math.prod(d[m] for m in range(n) if m not in layers)
            for mids in combinations(range(tau + 1, t), k - 1):
                path = (tau,) + mids + (t,)
                term = dprod
                for r, m in enumerate(layers):
                    term *= lam[m] * mats[m][path[r + 1], path[r]]
                total += term
    return total


# --------------------------------------------------------------------------
# positional codes
# --------------------------------------------------------------------------

@dataclass
class PositionalCodeReport:
    gamma: float
    code: np.ndarray = field(repr=False)
    increasing: bool = True
    impulse_partial_sum_err: float = 0.0
    code_partial_sum_err: float = 0.0

    @property
    def ok(self):
        return self.increasing and max(self.impulse_partial_sum_err, self.code_partial_sum_err) <= 1e-10


def partial_sum_closed_form(gamma, t):
    """``S_t = Gamma(t+1+gamma) / (Gamma(1+gamma) Gamma(t+1)) = prod_{i<=t}(1+gamma/i)``."""
    t = np.asarray(t, dtype=np.float64)
    return np.exp(log_gamma_quotient(t + 1.0, gamma, 0.0) - log_gamma_quotient(1.0, gamma, 0.0))


def positional_code_check(T=512, gamma=0.5, code=None):
    """Check a positional code against the uniform-routing closed forms.

    ``code`` defaults to the reference recursion. Two identities are checked:
    the running sums of the source-0 impulse equal ``S_t``, and the code's
    running sums equal the superposition ``sum_{tau<=t} S_t / S_tau`` of
    impulses from every source (constant forcing).
    """
    from .mixer import positional_code

    c = positional_code(T, gamma) if code is None else np.asarray(code, dtype=np.float64)
    t = np.arange(T, dtype=np.float64)
    S = partial_sum_closed_form(gamma, t)
    y0 = impulse_response(RoutingSpec.uniform(gamma), 0, T).tail()
    err_imp = float(np.max(np.abs(np.cumsum(y0) - S) / S))
    # partial sums of c: sum_{tau<=t} S_t / S_tau
    inv = np.cumsum(1.0 / S)
    sums = S * inv
    err_code = float(np.max(np.abs(np.cumsum(c) - sums) / sums))
    return PositionalCodeReport(gamma, c, bool(np.all(np.diff(c) > 0)), err_imp, err_code)
