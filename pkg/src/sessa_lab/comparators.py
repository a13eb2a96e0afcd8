"""Influence diagnostics for the comparison classes.

Causal attention (one-hop reads diluted by the visible set), diagonal
ZOH selective SSM channels (forgetting controlled by accumulated step size)
and LTI state-space systems (geometric forgetting).
"""
from dataclasses import dataclass
import math
import warnings

import numpy as np

from . import kernels
from .errors import CheckFailure, DomainError, InputError
from .numerics import causal_mask, default_window, fit_exponential, fit_power_law, softmax_row
from .theory import EnvelopeReport, ImpulseSeries, ROUNDOFF


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------

def attention_value_jacobian(alpha, logit_spread=None, atol=1e-10):
    """Operator norms ``J_{t,tau} = alpha_{t,tau}`` of fixed-routing attention.

    With ``logit_spread`` (the bound on ``max - min`` logit per row) the
    dilution envelope ``e^{-spread}/(t+1) <= J <= e^{spread}/(t+1)`` is
    asserted on the causal triangle.
    """
    A = np.asarray(alpha, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError("attention weights must be a square matrix")
    T = A.shape[0]
    if np.any(A < -atol) or np.any(np.abs(A[~causal_mask(T)]) > atol):
        raise InputError("attention weights must be non-negative and causal")
    if np.max(np.abs(A.sum(axis=1) - 1.0)) > 1e-9:
        raise InputError("attention rows must sum to 1")
    J = np.where(causal_mask(T), A, 0.0)
    if logit_spread is not None:
        n = np.arange(1, T + 1, dtype=np.float64)[:, None]
        lo, hi = math.exp(-logit_spread) / n, math.exp(logit_spread) / n
        mask = causal_mask(T)
        bad = mask & ((J < lo * (1 - ROUNDOFF)) | (J > hi * (1 + ROUNDOFF)))
        if bad.any():
            t, tau = np.argwhere(bad)[0]
            raise CheckFailure(f"dilution envelope violated at (t, tau) = ({t}, {tau})", J)
    return J


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def diffuse_attention_weights(T, spread, rng=None, keys="quasi"):
    """Causal attention with a fixed query and keys of bounded logit spread.

    Logits are ``spread * u_j`` with ``u_j`` in [0, 1], so every row has
    logit range at most ``spread``. ``keys="quasi"`` takes the golden-ratio
    sequence ``u_j = frac(j phi)`` (its running means settle at rate
    ``log t / t``); ``keys="random"`` draws ``u_j ~ U[0, 1]`` from ``rng``,
    whose running means fluctuate at rate ``t^{-1/2}``.
    """
    if keys == "quasi":
        u = (np.arange(T) * _GOLDEN) % 1.0
    elif keys == "random":
        u = rng.random(T)
    else:
        raise InputError(f"unknown key family {keys!r}")
    logits = spread * u
    A = np.zeros((T, T))
    for t in range(T):
        A[t, : t + 1] = softmax_row(logits[: t + 1])
    return A


def old_source_series(alpha, tau=0):
    """``J_{tau+l, tau}`` as an impulse series over the lag."""
    A = np.asarray(alpha, dtype=np.float64)
    return ImpulseSeries(tau, A[tau:, tau].copy())


def attention_dilution_fit(T=1025, spread=1.0, seed=0, window=(32, 1024), keys="quasi"):
    """Fitted power law of the fixed old-source attention Jacobian."""
    A = diffuse_attention_weights(T, spread, np.random.default_rng(seed), keys)
    return fit_power_law(old_source_series(A), window)


def smooth_routing_budget(Wq, Wk, x, t, tau, h=1e-6):
    """Both sides of ``sum_j ||d alpha_{t,j}/d x_tau|| <= 2 alpha_{t,tau} ||d logit_{t,tau}/d x_tau||``.

    Logits are ``<Wq^T x_t, Wk^T x_j>`` with token-wise linear maps; the
    left side is measured by central differences.
    """
    x = np.asarray(x, dtype=np.float64)
    if not tau < t:
        raise DomainError("smooth-routing budget needs tau < t")

    def row(xx):
        q = xx[t] @ Wq
        k = xx[: t + 1] @ Wk
        return softmax_row(k @ q)

    D = x.shape[1]
    grads = np.zeros((t + 1, D))
    for d in range(D):
        e = np.zeros_like(x)
        e[tau, d] = h
        grads[:, d] = (row(x + e) - row(x - e)) / (2 * h)
    lhs = float(np.linalg.norm(grads, axis=1).sum())
    alpha = row(x)
    dlogit = Wk @ (x[t] @ Wq)  # d<q_t, k_tau>/dx_tau
    rhs = 2.0 * alpha[tau] * float(np.linalg.norm(dlogit))
    return lhs, rhs


# --------------------------------------------------------------------------
# ZOH channels
# --------------------------------------------------------------------------

@dataclass
class ZohChannel:
    """Diagonal ZOH channel with rates ``a`` (N modes) and steps ``delta`` (T).

    ``B`` and ``C`` are optional per-step factors of shape (T,) or (T, N);
    they default to ones.
    """

    a: np.ndarray
    delta: np.ndarray
    B: np.ndarray = None
    C: np.ndarray = None

    def __post_init__(self):
        self.a = np.atleast_1d(np.asarray(self.a, dtype=np.float64))
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if np.any(~(self.a > 0)):
            raise DomainError("ZOH rates must be positive")
        if np.any(self.delta < 0) or not np.all(np.isfinite(self.delta)):
            raise DomainError("ZOH step sizes must be finite and non-negative")
        T = self.delta.shape[0]
        self.B = self._factor(self.B, T)
        self.C = self._factor(self.C, T)

    def _factor(self, v, T):
        if v is None:
            return np.ones((T, self.a.size))
        v = np.asarray(v, dtype=np.float64)
        return np.broadcast_to(v[:, None] if v.ndim == 1 else v, (T, self.a.size)).copy()

    @property
    def lam(self):
        return float(self.a.min())

    @property
    def T(self):
        return self.delta.shape[0]

    def transitions(self):
        """``A_bar`` and the injection coefficient ``(1 - A_bar)/a``, shape (T, N)."""
        x = self.delta[:, None] * self.a[None, :]
        return np.exp(-x), -np.expm1(-x) / self.a[None, :]


def zoh_simulate(ch, b, T=None):
    """Run ``h_t = A_bar_t h_{t-1} + ((1 - A_bar_t)/a) b_t`` from ``h_{-1} = 0``."""
    T = ch.T if T is None else int(T)
    if T > ch.T:
        raise InputError(f"channel defines only {ch.T} steps")
    b = np.asarray(b, dtype=np.float64)
    b = np.broadcast_to(b[:T, None] if b.ndim == 1 else b[:T], (T, ch.a.size))
    Abar, G = ch.transitions()
    return kernels.linear_scan(Abar[None, :T], (G[:T] * b)[None])[0]


@dataclass
class SsmJacobian:
    norm: float
    transition: float


def mamba_impulse_jacobian(ch, tau, t):
    """``|C_t (prod_{r=tau+1}^t A_bar_r) B_bar_tau|`` for the scalar channel output.

    ``transition`` is the slowest mode's factor ``exp(-lam sum Delta_r)``;
    the empty product (``t = tau``) is the identity.
    """
    if not 0 <= tau <= t < ch.T:
        raise InputError(f"need 0 <= tau <= t < T, got tau={tau}, t={t}")
    acc = ch.delta[tau + 1: t + 1].sum()
    prod = np.exp(-ch.a * acc)
    _, G = ch.transitions()
    val = float(np.sum(ch.C[t] * prod * G[tau] * ch.B[tau]))
    return SsmJacobian(abs(val), math.exp(-ch.lam * acc))


def mamba_jacobian_series(ch, tau=0):
    """Jacobian norms from source ``tau`` to every later step."""
    _, G = ch.transitions()
    acc = np.concatenate([[0.0], np.cumsum(ch.delta[tau + 1:])])
    prod = np.exp(-acc[:, None] * ch.a[None, :])
    vals = np.abs(np.sum(ch.C[tau:] * prod * (G[tau] * ch.B[tau])[None, :], axis=1))
    return ImpulseSeries(tau, vals)


def failed_freeze_channel(T, lam, c_delta, rng, n_modes=4, jitter=0.0):
    """Channel whose steps never fall below ``c_delta`` (``Delta_r = c_delta + jitter * U``)."""
    a = lam + np.arange(n_modes, dtype=np.float64)
    delta = c_delta + jitter * rng.random(T)
    return ZohChannel(a, delta)


def freeze_rate_fit(T=400, lam=1.0, c_delta=0.2, seed=0, jitter=0.0, window=None):
    """Exponential fit of the impulse Jacobian of a failed-freeze channel."""
    ch = failed_freeze_channel(T, lam, c_delta, np.random.default_rng(seed), jitter=jitter)
    series = mamba_jacobian_series(ch)
    return fit_exponential(series, window or default_window(T - 1))


# --------------------------------------------------------------------------
# LTI systems
# --------------------------------------------------------------------------

@dataclass
class LtiSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        for name in ("A", "B", "C"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InputError(f"{name} has non-finite entries")
        N = self.A.shape[0]
        if self.A.shape != (N, N) or self.B.shape[0] != N or self.C.shape[1] != N:
            raise InputError("inconsistent state-space shapes")
        self.spectral_radius = float(np.max(np.abs(np.linalg.eigvals(self.A))))

    @classmethod
    def random_stable(cls, rng, n=4, p=2, q=2, rho=0.9):
        A = rng.standard_normal((n, n))
        A *= rho / np.max(np.abs(np.linalg.eigvals(A)))
        return cls(A, rng.standard_normal((n, p)), rng.standard_normal((q, n)))


@dataclass
class LtiResponse:
    series: ImpulseSeries
    fit: object
    log_rho: float


def lti_impulse_response(sys, ell_max, window=None):
    """``||C A^l B||_2`` for ``l = 0..ell_max`` with an exponential fit.

    Warns rather than fails when the system is not strictly stable; the fit
    is skipped (``None``) when the window is too short or hits exact zeros.
    """
    if sys.spectral_radius >= 1:
        warnings.warn(f"spectral radius {sys.spectral_radius:.4g} >= 1: no exponential decay expected")
    vals = np.empty(ell_max + 1)
    M = sys.B.copy()
    for ell in range(ell_max + 1):
        vals[ell] = np.linalg.norm(sys.C @ M, 2)
        M = sys.A @ M
    series = ImpulseSeries(0, vals)
    fit = None
    win = window or default_window(ell_max)
    if win[1] - win[0] >= 7 and np.all(vals[win[0]: win[1] + 1] > 0):
        fit = fit_exponential(series, win)
    log_rho = math.log(sys.spectral_radius) if sys.spectral_radius > 0 else -math.inf
    return LtiResponse(series, fit, log_rho)


# --------------------------------------------------------------------------
# local ZOH block, end-to-end
# --------------------------------------------------------------------------

def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LocalZohBlock:
    """Single-output selective SSM with token-wise maps.

    ``Delta(x) = softplus(<w_delta, x> + b_delta)``, ``B~(x) = W_B x + b_B``,
    ``u(x) = tanh(<w_u, x>)``, ``C(x) = W_C x + b_C`` and
    ``y_t = <C(x_t), h_t>`` with the ZOH-diagonal state update.
    """

    a: np.ndarray
    w_delta: np.ndarray
    b_delta: float
    W_B: np.ndarray
    b_B: np.ndarray
    w_u: np.ndarray
    W_C: np.ndarray
    b_C: np.ndarray

    @classmethod
    def random(cls, rng, D=4, N=3, lam=1.0, b_delta=0.0, delta_gain=0.5):
        return cls(
            a=lam + np.arange(N, dtype=np.float64),
            w_delta=delta_gain * rng.standard_normal(D) / math.sqrt(D),
            b_delta=float(b_delta),
            W_B=rng.standard_normal((N, D)) / math.sqrt(D),
            b_B=0.5 * rng.standard_normal(N),
            w_u=rng.standard_normal(D) / math.sqrt(D),
            W_C=rng.standard_normal((N, D)) / math.sqrt(D),
            b_C=0.5 * rng.standard_normal(N),
        )

    @property
    def lam(self):
        return float(self.a.min())

    def delta(self, x):
        return _softplus(x @ self.w_delta + self.b_delta)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        d = self.delta(x)
        Abar = np.exp(-d[:, None] * self.a)
        G = -np.expm1(-d[:, None] * self.a) / self.a
        Bt = x @ self.W_B.T + self.b_B
        u = np.tanh(x @ self.w_u)
        h = kernels.linear_scan(Abar[None], (G * Bt * u[:, None])[None])[0]
        C = x @ self.W_C.T + self.b_C
        return np.sum(C * h, axis=1)

    def constants(self, x):
        """Pointwise constants of the end-to-end bound over the tokens of ``x``.

        Each is the supremum over ``t`` of the relevant quantity at ``x_t``,
        with exact token-wise derivatives, which is all the bound uses.
        """
        x = np.asarray(x, dtype=np.float64)
        z = x @ self.w_delta + self.b_delta
        d = _softplus(z)
        Abar = np.exp(-d[:, None] * self.a)
        # dA_n/dx = -a_n A_n sigmoid(z) w_delta; rank one, norm = ||column|| ||w||
        LA = np.max(np.linalg.norm(self.a * Abar, axis=1) * _sigmoid(z)) * np.linalg.norm(self.w_delta)
        U = np.max(np.abs(np.tanh(x @ self.w_u)))
        Lu = np.max(1.0 - np.tanh(x @ self.w_u) ** 2) * np.linalg.norm(self.w_u)
        G = np.max(np.linalg.norm(x @ self.W_B.T + self.b_B, axis=1))
        LB = np.linalg.norm(self.W_B, 2)
        CR = np.max(np.linalg.norm(x @ self.W_C.T + self.b_C, axis=1))
        lam, N = self.lam, self.a.size
        HR = math.sqrt(N) * G * U / lam
        JR = LA * HR + LA / lam * G * U + (LB * U + G * Lu) / lam
        return {"C_R": CR, "G_max": G, "U_R": U, "L_A": LA, "L_B": LB, "L_u": Lu,
                "H_R": HR, "J_R": JR, "C": CR * JR, "lam": lam}


def mamba_e2e_fd_jacobian(block, x, t, tau, h=1e-5):
    """``||d y_t / d x_tau||_2`` by central differences."""
    x = np.asarray(x, dtype=np.float64)
    if not tau < t:
        raise DomainError("end-to-end probe needs tau < t")
    g = np.empty(x.shape[1])
    for d in range(x.shape[1]):
        e = np.zeros_like(x)
        e[tau, d] = h
        g[d] = (block.forward(x + e)[t] - block.forward(x - e)[t]) / (2 * h)
    if not np.all(np.isfinite(g)):
        raise InputError("non-finite finite-difference Jacobian")
    return float(np.linalg.norm(g))


def mamba_e2e_check(block, x, tau=0, lags=None, h=1e-5, strict=True):
    """Measured end-to-end norms against ``C(R) exp(-lam sum Delta_r)``."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[0]
    lags = np.arange(1, T - tau) if lags is None else np.asarray(lags)
    k = block.constants(x)
    d = block.delta(x)
    norms = np.array([mamba_e2e_fd_jacobian(block, x, tau + l, tau, h) for l in lags])
    acc = np.array([d[tau + 1: tau + l + 1].sum() for l in lags])
    env = k["C"] * np.exp(-k["lam"] * acc)
    rep = EnvelopeReport("mamba_e2e", lags, norms, env, norms > env * (1 + 1e-6) + 1e-12,
                         {**k, "c_delta": float(d[tau + 1:].min())})
    return rep.raise_if_failed() if strict else rep
