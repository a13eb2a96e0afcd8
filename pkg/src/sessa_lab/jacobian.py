"""End-to-end Jacobians of real blocks and their tail envelopes.

``J_{t,tau}(x) = d y_t / d x_tau`` is measured by central differences or
assembled from the analytic backward pass; the envelope constants of the
polynomial tail bound are evaluated pointwise at each input.
"""
from dataclasses import dataclass, field
import csv
import math

import numpy as np

from .errors import CheckFailure, DomainError, InputError, RegimeError
from .mixer import block_backward, block_forward
from .numerics import fit_power_law, gelu_prime, rope_frequencies
from .theory import DecayFit, KernelSpec, deep_path_sum_bound  # noqa: F401

FD_STEP = 1e-5


# --------------------------------------------------------------------------
# stacks and evaluators
# --------------------------------------------------------------------------

class BlockStack:
    """Composition of blocks given as ``(params, config)`` pairs."""

    def __init__(self, blocks):
        if not blocks:
            raise InputError("a stack needs at least one block")
        self.blocks = list(blocks)

    @classmethod
    def wrap(cls, obj):
        if isinstance(obj, BlockStack):
            return obj
        if isinstance(obj, tuple) and len(obj) == 2 and not isinstance(obj[0], tuple):
            return cls([obj])
        return cls(obj)

    def forward(self, x):
        for p, c in self.blocks:
            x, _ = block_forward(x, p, c)
        return x

    def forward_cached(self, x):
        caches = []
        for p, c in self.blocks:
            x, cache = block_forward(x, p, c)
            caches.append(cache)
        return x, caches

    def vjp(self, caches, g):
        for (p, c), cache in zip(reversed(self.blocks), reversed(caches)):
            g, _ = block_backward(cache, p, g, c)
        return g

    def __len__(self):
        return len(self.blocks)


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise InputError(f"non-finite values in {what}")
    return a


def e2e_jacobian(block, x, t, tau, method="finite_diff", h=FD_STEP):
    """``d y_t / d x_tau`` as a D x D matrix (rows: output coordinates).

    ``block`` is a ``(params, config)`` pair, a list of them or a
    :class:`BlockStack`; plain callables work with ``finite_diff`` only.
    """
    x = np.asarray(x, dtype=np.float64)
    T, D = x.shape
    if not (0 <= t < T and 0 <= tau < T):
        raise InputError(f"indices out of range: t={t}, tau={tau}, T={T}")
    if method == "finite_diff":
        f = block if callable(block) and not isinstance(block, BlockStack) else BlockStack.wrap(block).forward
        xs = np.repeat(x[None], 2 * D, axis=0)
        for d in range(D):
            xs[2 * d, tau, d] += h
            xs[2 * d + 1, tau, d] -= h
        ys = _check_finite(np.asarray(f(xs)), "block output")
        return (ys[0::2, t, :] - ys[1::2, t, :]).T / (2 * h)
    if method == "adjoint":
        stack = BlockStack.wrap(block)
        _, caches = stack.forward_cached(np.repeat(x[None], D, axis=0))
        g = np.zeros((D, T, D))
        g[np.arange(D), t, np.arange(D)] = 1.0
        gx = _check_finite(stack.vjp(caches, g), "adjoint")
        return gx[:, tau, :]
    raise InputError(f"unknown method {method!r}")


def source_column(block, x, tau, h=FD_STEP):
    """``d y_t / d x_tau`` for every ``t`` at once, shape (T, D, D), by central differences."""
    x = np.asarray(x, dtype=np.float64)
    T, D = x.shape
    stack = BlockStack.wrap(block)
    xs = np.repeat(x[None], 2 * D, axis=0)
    for d in range(D):
        xs[2 * d, tau, d] += h
        xs[2 * d + 1, tau, d] -= h
    ys = _check_finite(stack.forward(xs), "block output")
    return np.transpose(ys[0::2] - ys[1::2], (1, 2, 0)) / (2 * h)


def full_jacobian(block, x, chunk=64):
    """All blocks ``J[t, :, tau, :]`` via batched adjoints, shape (T, D, T, D)."""
    x = np.asarray(x, dtype=np.float64)
    T, D = x.shape
    stack = BlockStack.wrap(block)
    J = np.empty((T, D, T, D))
    idx = [(t, i) for t in range(T) for i in range(D)]
    for start in range(0, len(idx), chunk):
        part = idx[start:start + chunk]
        n = len(part)
        _, caches = stack.forward_cached(np.repeat(x[None], n, axis=0))
        g = np.zeros((n, T, D))
        for r, (t, i) in enumerate(part):
            g[r, t, i] = 1.0
        gx = stack.vjp(caches, g)
        for r, (t, i) in enumerate(part):
            J[t, i] = gx[r]
    return J


def spectral_norm(M, iters=30, tol=1e-10):
    """Largest singular value of a matrix or a stack of matrices.

    Power iteration on ``M^T M``; entries whose Rayleigh quotient has not
    settled to ``tol`` (relative) after ``iters`` steps fall back to an SVD.
    """
    M = np.asarray(M, dtype=np.float64)
    single = M.ndim == 2
    S = M[None] if single else M.reshape(-1, *M.shape[-2:])
    v = np.ones((S.shape[0], S.shape[-1])) + 0.1 * np.arange(S.shape[-1])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    sig_prev = np.zeros(S.shape[0])
    sig = sig_prev
    for _ in range(iters):
        w = np.einsum("nij,nj->ni", S, v)
        sig = np.linalg.norm(w, axis=1)
        u = np.einsum("nij,ni->nj", S, w)
        nu = np.linalg.norm(u, axis=1, keepdims=True)
        v = np.divide(u, nu, out=v.copy(), where=nu > 0)
        conv = np.abs(sig - sig_prev) <= 1e-2 * tol * np.maximum(sig, 1e-300)
        sig_prev = sig
    w = np.einsum("nij,nj->ni", S, v)
    sig = np.linalg.norm(w, axis=1)
    conv = np.abs(sig - sig_prev) <= 1e-2 * tol * np.maximum(sig, 1e-300)
    if not conv.all():
        sig = sig.copy()
        sig[~conv] = np.linalg.norm(S[~conv], ord=2, axis=(-2, -1))
    return float(sig[0]) if single else sig.reshape(M.shape[:-2])


# --------------------------------------------------------------------------
# analytic token-wise pieces of one Sessa block (single sequence)
# --------------------------------------------------------------------------

def _rotate(v, pos, base):
    """RoPE rotation of ``v`` (..., d_k) by broadcastable positions ``pos``."""
    omega = rope_frequencies(v.shape[-1], base)
    ang = np.asarray(pos, dtype=np.float64)[..., None] * omega
    c, s = np.cos(ang), np.sin(ang)
    x, y = v[..., 0::2], v[..., 1::2]
    out = np.empty(np.broadcast_shapes(v.shape, c.shape[:-1] + (v.shape[-1],)))
    out[..., 0::2] = x * c - y * s
    out[..., 1::2] = x * s + y * c
    return out


@dataclass
class BranchJacobians:
    """Token-wise Jacobians and the quantities the tail constants need."""

    P: np.ndarray          # d abar_t / d x_t, (T, D, D)
    Jf: np.ndarray         # d f_t / d x_tau, (T, T, D, D), zero for tau > t
    f: np.ndarray
    g: np.ndarray
    alpha_b: np.ndarray
    gamma: np.ndarray
    qb: np.ndarray
    kb: np.ndarray
    abar: np.ndarray


def branch_jacobians(x, params, config):
    """Exact Jacobians of the forward branch ``x -> f`` of one block."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InputError("branch Jacobians take a single (T, D) sequence")
    if config.kind != "sessa":
        raise InputError("branch Jacobians are defined for the full Sessa mixer")
    T, D = x.shape
    _, cache = block_forward(x, params, config)
    xn, a, g, abar = cache.xn[0], cache.a[0], cache.g[0], cache.abar[0]
    # d xn / d x per token
    if config.norm_mode == "layernorm":
        inv = cache.inv_std[0][:, 0]
        Jn = inv[:, None, None] * (np.eye(D)[None] - 1.0 / D - xn[:, :, None] * xn[:, None, :] / D)
    else:
        Jn = np.broadcast_to(np.eye(D), (T, D, D))
    P = gelu_prime(a)[:, :, None] * np.einsum("ed,tef->tdf", params.W_in[:, :D], Jn)
    sc, base = config.scale, config.rope_base
    alpha, f = cache.alpha_f[0], cache.f[0]
    q = abar @ params.W_Qf
    k = abar @ params.W_Kf
    v = abar @ params.W_V
    qr = _rotate(q, np.arange(T), base)
    kr = _rotate(k, np.arange(T), base)
    taus = np.arange(T)
    # key side: d logit_{t,tau} / d abar_tau = sc W_Kf R_tau^T qr_t
    u = _rotate(qr[:, None, :], -taus[None, :], base)               # (t, tau, dk)
    gk = sc * u @ params.W_Kf.T                                      # (t, tau, D)
    diff = v[None, :, :] - f[:, None, :]                             # v_tau - f_t
    Ja = alpha[:, :, None, None] * (params.W_V.T[None, None] + diff[..., :, None] * gk[..., None, :])
    # query side on the diagonal: sc sum_j alpha_{t,j} (v_j - f_t) (W_Qf R_t^T kr_j)^T
    Z = np.einsum("tj,tjd,jk->tdk", alpha, diff, kr)
    Zr = _rotate(Z, -taus[:, None], base)                            # rotate kr index back by t
    Ja[taus, taus] += sc * Zr @ params.W_Qf.T
    Jf = np.einsum("tsde,sef->tsdf", Ja, P)
    Jf *= np.tri(T, T, 0)[:, :, None, None]
    return BranchJacobians(P, Jf, f, g, cache.alpha_b[0], cache.gamma[0],
                           abar @ params.W_Qb, abar @ params.W_Kb, abar)


@dataclass
class TailConstants:
    c2: float
    gamma_max: float
    beta: float
    F_R: float
    G_R: float
    S_R: float
    L_f: float
    L_f0: float
    L_route: float
    L_alpha0: float
    L_gamma: float
    A0: float
    A1: float
    C_K: float
    C_beta: float
    C: float
    W_out_norm: float
    R: float

    def envelope(self, lags):
        lags = np.asarray(lags, dtype=np.float64)
        return (self.W_out_norm * self.G_R * self.C * lags ** (-self.beta)
                * (1.0 + np.log1p(lags)))


def tail_constants(x, params, config, c2=None, gamma_max=None, bj=None):
    """Evaluate every constant of the block tail bound at the input ``x``.

    Declared ``c2``/``gamma_max`` are verified against the measured routing;
    without declarations the measured values are used.
    """
    bj = branch_jacobians(x, params, config) if bj is None else bj
    T, D = bj.f.shape
    t_idx = np.arange(T, dtype=np.float64)
    lower = np.tri(T, T, -1, dtype=bool)
    c2_meas = float(np.max(bj.alpha_b[1:] * t_idx[1:, None], initial=0.0))
    gm_meas = float(np.max(np.abs(bj.gamma)))
    if c2 is not None and c2_meas > c2 * (1 + 1e-12):
        raise RegimeError(f"feedback routing not diffuse: max t*alpha = {c2_meas:.4g} > c2 = {c2}")
    if gamma_max is not None and gm_meas > gamma_max * (1 + 1e-12):
        raise RegimeError(f"gain {gm_meas:.4g} exceeds gamma_max = {gamma_max}")
    c2 = c2_meas if c2 is None else c2
    gm = gm_meas if gamma_max is None else gamma_max
    eta = gm * c2
    if not eta < 1:
        raise RegimeError(f"supercritical routing: gamma_max * c2 = {eta:.4g} >= 1")
    beta = 1.0 - eta
    sc = config.scale
    norms = spectral_norm(bj.Jf.reshape(T * T, D, D)).reshape(T, T)
    L_f0 = float(np.max(np.diag(norms)))
    L_f = float(np.max((norms * (t_idx[:, None] + 1.0))[lower], initial=0.0))
    F_R = float(np.max(np.linalg.norm(bj.f, axis=1)))
    G_R = float(np.max(np.linalg.norm(bj.g, axis=1)))
    S_R = F_R / (1.0 - gm)
    # routing sensitivities; logits sc <qb_t, kb_j> with token-wise projections
    gq = sc * bj.qb @ params.W_Kb.T                                  # d logit_{t,tau}/d abar_tau
    key_grad = np.linalg.norm(np.einsum("td,sdf->tsf", gq, bj.P), axis=-1)
    L_route = float(np.max((bj.alpha_b * key_grad * (t_idx[:, None] + 1.0))[lower], initial=0.0))
    hq = sc * bj.kb @ params.W_Qb.T                                  # d logit_{t,j}/d abar_t (per j)
    H = np.einsum("jd,tdf->tjf", hq, bj.P)                           # (t, j, D)
    mean = np.einsum("tj,tjf->tf", bj.alpha_b, H)
    dalpha = bj.alpha_b[..., None] * (H - mean[:, None, :])
    L_alpha0 = float(np.max(np.where(lower, np.linalg.norm(dalpha, axis=-1), 0.0).sum(axis=1)))
    dg = (1.0 - bj.gamma ** 2)[:, None] * np.einsum("d,tdf->tf", params.w_gamma, bj.P)
    L_gamma = float(np.max(np.linalg.norm(dg, axis=1)))
    A1 = L_f + 2.0 * gm * S_R * L_route
    A0 = L_f0 + L_gamma * S_R + gm * S_R * L_alpha0
    C_K = eta * math.exp(eta)
    C_beta = 2.0 ** beta + 2.0 ** beta / (1.0 - beta)
    C = max(1.0, C_K) * (A0 + (1.0 + C_beta) * A1)
    return TailConstants(c2, gm, beta, F_R, G_R, S_R, L_f, L_f0, L_route, L_alpha0, L_gamma,
                         A0, A1, C_K, C_beta, C, float(np.linalg.norm(params.W_out, 2)),
                         float(np.max(np.linalg.norm(x, axis=1))))


# --------------------------------------------------------------------------
# tail checks
# --------------------------------------------------------------------------

@dataclass
class JacobianBlockReport:
    """Measured Jacobian norms next to the tail envelope.

    ``pairs`` rows: ``(sample, t, tau, lag, norm, envelope, ok)``.
    """

    pairs: list = field(default_factory=list)
    constants: list = field(default_factory=list)
    log_factor: bool = True
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    @property
    def beta(self):
        return min(c.beta for c in self.constants) if self.constants else None

    def max_ratio(self):
        return max((n / e for *_, n, e, _ in self.pairs if e > 0), default=0.0)

    def raise_if_failed(self):
        if self.violations:
            s, t, tau = self.violations[0][:3]
            raise CheckFailure(f"Jacobian envelope violated (sample {s}, t={t}, tau={tau})", self)
        return self


def write_jacobian_csv(path, report):
    """Columns ``t, tau, lag, norm, envelope, ok`` (plus the sample index)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "t", "tau", "lag", "norm", "envelope", "ok"])
        for s, t, tau, lag, n, e, ok in report.pairs:
            w.writerow([s, t, tau, lag, repr(n), repr(e), int(ok)])


def sessa_tail_check(params, config, inputs, taus=(0,), c2=None, gamma_max=None,
                     h=FD_STEP, strict=True):
    """Measure ``||d y_{tau+l} / d x_tau||_2`` on each input and compare with
    ``||W_out||_2 G_R C(R) l^{-beta} (1 + log(1 + l))``.

    Parameters
    ----------
    params, config : the block under test (identity norm, full Sessa mixer)
    inputs : iterable of (T, D) arrays
    taus : source positions probed on every input
    c2, gamma_max : optional declared regime constants; verified per sample
    """
    rep = JacobianBlockReport()
    for s, x in enumerate(inputs):
        x = np.asarray(x, dtype=np.float64)
        try:
            k = tail_constants(x, params, config, c2, gamma_max)
        except RegimeError as err:
            raise RegimeError(f"sample {s}: {err}") from None
        rep.constants.append(k)
        T = x.shape[0]
        for tau in taus:
            if tau >= T - 1:
                continue
            col = source_column((params, config), x, tau, h)
            lags = np.arange(1, T - tau)
            norms = spectral_norm(col[tau + 1:])
            env = k.envelope(lags)
            for lag, n, e in zip(lags, norms, env):
                ok = bool(n <= e)
                rep.pairs.append((s, int(tau + lag), int(tau), int(lag), float(n), float(e), ok))
                if not ok:
                    rep.violations.append((s, int(tau + lag), int(tau), float(n), float(e)))
    return rep.raise_if_failed() if strict else rep


def uniform_feedback_params(params, gamma=0.5):
    """Copy of ``params`` with zero feedback logits and constant gain ``gamma``."""
    p = params.copy()
    p.W_Qb[...] = 0.0
    p.W_Kb[...] = 0.0
    p.w_gamma[...] = 0.0
    p.b_gamma = np.array(math.atanh(gamma))
    return p


# --------------------------------------------------------------------------
# deep stacks
# --------------------------------------------------------------------------

@dataclass
class DeepTailReport:
    lags: np.ndarray
    max_norms: np.ndarray
    bounds: np.ndarray
    fit: DecayFit
    ok: bool


def layer_norm_matrices(block, x):
    """Per-pair operator norms ``||J_{t,tau}||`` of one block at input ``x``."""
    J = full_jacobian(block, x)
    T, D = x.shape
    return spectral_norm(J.transpose(0, 2, 1, 3).reshape(T * T, D, D)).reshape(T, T)


def chain_rule_composite(J1, J2):
    """``sum_j J2[t, :, j, :] J1[j, :, tau, :]`` for full (T, D, T, D) Jacobians."""
    return np.einsum("tajb,jbsc->tasc", J2, J1)


def deep_stack_tail(blocks, x, tau_max=0, lags=None, fit_window=None):
    """Composite Jacobian norms of a stack versus the layer-wise path-sum bound.

    Each layer's envelope is its own measured norm matrix at the input it
    actually sees: ``d_p = max_t ||J^p_{t,t}||`` and ``K_p(t, tau) = ||J^p_{t,tau}||``.
    Returns per-lag maxima over sources ``tau <= tau_max``.
    """
    stack = BlockStack.wrap(blocks)
    if len(stack) > 4:
        raise DomainError("deep_stack_tail supports at most 4 layers")
    x = np.asarray(x, dtype=np.float64)
    T, D = x.shape
    if T > 256:
        raise DomainError("deep_stack_tail supports T <= 256")
    h = x
    prod = None
    for blk in stack.blocks:
        Kn = layer_norm_matrices(blk, h)
        layer = np.tril(Kn, -1) + np.diag(np.full(T, np.max(np.diag(Kn))))
        prod = layer if prod is None else layer @ prod
        h, _ = block_forward(h, *blk)
    J = full_jacobian(stack, x)
    norms = spectral_norm(J.transpose(0, 2, 1, 3).reshape(T * T, D, D)).reshape(T, T)
    lags = np.arange(1, T - tau_max) if lags is None else np.asarray(lags)
    mx, bd = [], []
    for lag in lags:
        taus = np.arange(0, min(tau_max, T - 1 - lag) + 1)
        mx.append(np.max(norms[taus + lag, taus]))
        bd.append(np.max(prod[taus + lag, taus]))
    mx, bd = np.array(mx), np.array(bd)
    fit = None
    if lags.size >= 16:
        from .theory import ImpulseSeries

        series = ImpulseSeries(0, np.concatenate([[1.0], mx]))
        fit = fit_power_law(series, fit_window or (max(2, int(math.sqrt(lags[-1]))), int(lags[-1])))
    return DeepTailReport(lags, mx, bd, fit, bool(np.all(mx <= bd * (1 + 1e-9))))
