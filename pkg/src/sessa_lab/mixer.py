"""The Sessa block: gated projection, forward attention, feedback solve.

Shapes follow the usual (batch, time, feature) layout. Every public function
also accepts a single sequence of shape (T, D) and returns unbatched results
in that case.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from . import kernels
from .errors import CacheError, ConfigError, InputError
from .numerics import (
    DEFAULT_ROPE_BASE,
    as_finite,
    causal_mask,
    gelu,
    gelu_prime,
    masked_softmax,
    rope_apply,
    softmax_backward,
)
from .params import ParamSet, gaussian

MIXER_KINDS = ("sessa", "sessa_no_feedback", "attention", "zoh_ssm")
NORM_MODES = ("identity", "layernorm")


@dataclass(frozen=True)
class MixerConfig:
    """Dimensions and switches for one block.

    ``kind`` selects the sequence mixer inside the shared block shell;
    ``n_heads``/``d_head`` only matter for ``attention`` and ``d_state``
    only for ``zoh_ssm``.
    """

    D: int
    d_k: int
    T_max: int
    rope_base: float = DEFAULT_ROPE_BASE
    norm_mode: str = "identity"
    ln_eps: float = 1e-5
    kind: str = "sessa"
    n_heads: int = 2
    d_head: int = 0
    d_state: int = 0

    def __post_init__(self):
        if self.D < 1 or self.T_max < 1:
            raise ConfigError(f"need D >= 1 and T_max >= 1, got D={self.D}, T_max={self.T_max}")
        if self.d_k < 2 or self.d_k % 2:
            raise ConfigError(f"d_k must be even and positive, got {self.d_k}")
        if not self.rope_base > 1:
            raise ConfigError(f"rope_base must exceed 1, got {self.rope_base}")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if self.norm_mode == "layernorm" and not self.ln_eps > 0:
            raise ConfigError("layernorm needs ln_eps > 0")
        if self.kind not in MIXER_KINDS:
            raise ConfigError(f"unknown mixer kind {self.kind!r}")
        if self.kind == "attention":
            if self.n_heads < 1 or self.D % self.n_heads:
                raise ConfigError(f"n_heads={self.n_heads} must divide D={self.D}")
            if self.head_width % 2:
                raise ConfigError("attention head width must be even for RoPE")

    @property
    def scale(self):
        return 1.0 / math.sqrt(self.d_k)

    @property
    def head_width(self):
        # default keeps the attention baseline's parameter count near the Sessa mixer's
        return self.d_head or self.d_k

    @property
    def state_width(self):
        return self.d_state or max(1, round(4 * self.d_k / 3))


@dataclass
class BlockParams(ParamSet):
    """Learnable parameters of one Sessa block; ``b_gamma`` is a 0-d array."""

    W_in: np.ndarray
    b_in: np.ndarray
    W_Qf: np.ndarray
    W_Kf: np.ndarray
    W_Qb: np.ndarray
    W_Kb: np.ndarray
    W_V: np.ndarray
    w_gamma: np.ndarray
    b_gamma: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    @classmethod
    def zeros(cls, config):
        D, dk = config.D, config.d_k
        return cls(
            W_in=np.zeros((D, 2 * D)), b_in=np.zeros(2 * D),
            W_Qf=np.zeros((D, dk)), W_Kf=np.zeros((D, dk)),
            W_Qb=np.zeros((D, dk)), W_Kb=np.zeros((D, dk)),
            W_V=np.zeros((D, D)), w_gamma=np.zeros(D), b_gamma=np.zeros(()),
            W_out=np.zeros((D, D)), b_out=np.zeros(D),
        )

    @classmethod
    def init(cls, config, rng, b_gamma=-1.0):
        """Scaled-Gaussian init (std ``1/sqrt(fan_in)``), zero biases.

        ``b_gamma`` starts negative so the initial gain is moderate.
        """
        D, dk = config.D, config.d_k
        p = cls.zeros(config)
        p.W_in = gaussian(rng, D, (D, 2 * D))
        for name, shape in (("W_Qf", (D, dk)), ("W_Kf", (D, dk)), ("W_Qb", (D, dk)),
                            ("W_Kb", (D, dk)), ("W_V", (D, D)), ("W_out", (D, D))):
            setattr(p, name, gaussian(rng, D, shape))
        p.w_gamma = gaussian(rng, D, (D,))
        p.b_gamma = np.array(float(b_gamma))
        return p


_FEEDBACK_FIELDS = ("W_Qb", "W_Kb", "w_gamma", "b_gamma")


def active_param_count(params, config):
    """Parameters that influence the output (the ablation drops the feedback branch)."""
    n = params.num_params()
    if config.kind == "sessa_no_feedback":
        n -= sum(np.size(getattr(params, k)) for k in _FEEDBACK_FIELDS)
    return n


@dataclass
class FeedbackMatrix:
    """Strictly lower-triangular routing ``B_{t,j} = gamma_t alpha^b_{t,j}``."""

    entries: np.ndarray
    row_gains: np.ndarray

    def row_abs_sums(self):
        return np.abs(self.entries).sum(axis=-1)

    def contraction(self):
        """``max_t sum_j |B_{t,j}|``; below one for every admissible matrix."""
        return float(self.row_abs_sums().max(initial=0.0))

    def validate(self, atol=1e-12):
        B = self.entries
        T = B.shape[-1]
        if np.any(B[..., ~causal_mask(T, strict=True)] != 0):
            raise InputError("feedback matrix is not strictly lower triangular")
        gains = np.abs(self.row_gains)
        if np.any(gains >= 1):
            raise InputError("feedback gain outside (-1, 1)")
        sums = self.row_abs_sums()
        if T > 1 and np.max(np.abs(sums[..., 1:] - gains[..., 1:])) > atol:
            raise InputError("feedback row sums disagree with the gains")
        return self


@dataclass
class MixerCache:
    """Everything the backward pass needs from one forward evaluation.

    Arrays carry a leading batch axis even for single-sequence calls.
    ``extra`` holds mixer-specific intermediates (projections, scan states).
    """

    kind: str
    x: np.ndarray
    xn: np.ndarray
    inv_std: np.ndarray
    a: np.ndarray
    g: np.ndarray
    abar: np.ndarray
    s: np.ndarray
    alpha_f: np.ndarray = None
    alpha_b: np.ndarray = None
    gamma: np.ndarray = None
    f: np.ndarray = None
    single: bool = False
    param_shapes: dict = field(default_factory=dict)
    config: object = None
    extra: dict = field(default_factory=dict)


def _batched(x, name="x"):
    x = as_finite(x, name)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise InputError(f"{name} must have shape (T, D) or (B, T, D), got {x.shape}")
    return x, False


def _unbatch(a, single):
    return a[0] if single else a


def _check_shapes(params, expected):
    for name, shape in expected.items():
        got = np.shape(getattr(params, name))
        if got != shape:
            raise InputError(f"parameter {name} has shape {got}, expected {shape}")


def _sessa_shapes(config):
    D, dk = config.D, config.d_k
    return {
        "W_in": (D, 2 * D), "b_in": (2 * D,), "W_Qf": (D, dk), "W_Kf": (D, dk),
        "W_Qb": (D, dk), "W_Kb": (D, dk), "W_V": (D, D), "w_gamma": (D,),
        "b_gamma": (), "W_out": (D, D), "b_out": (D,),
    }


def _sum_outer(x, g):
    # sum over batch and time of x_t^T g_t
    return np.einsum("btd,bte->de", x, g)


# --------------------------------------------------------------------------
# mixer pieces
# --------------------------------------------------------------------------

def _forward_attention(abar, params, config):
    T = abar.shape[1]
    q = rope_apply(abar @ params.W_Qf, config.rope_base)
    k = rope_apply(abar @ params.W_Kf, config.rope_base)
    v = abar @ params.W_V
    logits = config.scale * (q @ k.transpose(0, 2, 1))
    alpha = masked_softmax(logits, causal_mask(T))
    return alpha @ v, alpha, q, k, v


def _build_feedback(abar, params, config):
    T = abar.shape[1]
    qb = abar @ params.W_Qb
    kb = abar @ params.W_Kb
    logits = config.scale * (qb @ kb.transpose(0, 2, 1))
    alpha = masked_softmax(logits, causal_mask(T, strict=True))
    gamma = np.tanh(abar @ params.w_gamma + float(params.b_gamma))
    return alpha, gamma, gamma[..., None] * alpha, qb, kb


def forward_attention(abar, params, config, return_weights=False):
    """Causal RoPE attention ``f_t = sum_{j<=t} alpha^f_{t,j} v_j``.

    Parameters
    ----------
    abar : ndarray, shape (T, D) or (B, T, D)
        Activated mixer input.
    params : BlockParams
    config : MixerConfig
    return_weights : bool
        Also return the attention weights.
    """
    x, single = _batched(abar, "abar")
    f, alpha, *_ = _forward_attention(x, params, config)
    f, alpha = _unbatch(f, single), _unbatch(alpha, single)
    return (f, alpha) if return_weights else f


def build_feedback(abar, params, config):
    """Strict-past feedback weights, gains and the routing matrix.

    Returns
    -------
    alpha_b : ndarray (..., T, T)
        Row-stochastic over ``j < t``; row 0 is zero.
    gamma : ndarray (..., T)
        ``tanh(<abar_t, w_gamma> + b_gamma)``.
    B : FeedbackMatrix
    """
    x, single = _batched(abar, "abar")
    if x.shape[1] < 1:
        raise InputError("need at least one time step")
    alpha, gamma, B, *_ = _build_feedback(x, params, config)
    alpha, gamma, B = (_unbatch(a, single) for a in (alpha, gamma, B))
    return alpha, gamma, FeedbackMatrix(B, gamma)


def _entries(B):
    return B.entries if isinstance(B, FeedbackMatrix) else np.asarray(B, dtype=np.float64)


def triangular_solve(B, f):
    """Solve ``(I - B) s = f`` feature-wise by forward substitution."""
    return kernels.forward_substitution(_entries(B), as_finite(f, "f"))


def triangular_solve_adjoint(B, s, g_s):
    """Cotangents of ``s = (I - B)^{-1} f`` with respect to ``f`` and ``B``.

    ``g_f`` solves the transposed system ``(I - B)^T g_f = g_s``;
    ``g_B[t, j] = <g_f_t, s_j>`` on the strict lower triangle, zero elsewhere.
    """
    Bm = _entries(B)
    s = np.asarray(s, dtype=np.float64)
    g_s = np.asarray(g_s, dtype=np.float64)
    if s.shape != g_s.shape or Bm.shape[-1] != s.shape[-2]:
        raise InputError("triangular_solve_adjoint: inconsistent shapes")
    g_f = kernels.backward_substitution(Bm, g_s)
    T = s.shape[-2]
    g_B = (g_f @ np.swapaxes(s, -1, -2)) * causal_mask(T, strict=True)
    return g_f, g_B


def _sessa_forward(abar, params, config, cache):
    f, alpha_f, q, k, v = _forward_attention(abar, params, config)
    if config.kind == "sessa_no_feedback":
        Bsz, T = abar.shape[:2]
        alpha_b = np.zeros((Bsz, T, T))
        gamma = np.zeros((Bsz, T))
        s = f.copy()
        Bm, qb, kb = alpha_b, None, None
    else:
        alpha_b, gamma, Bm, qb, kb = _build_feedback(abar, params, config)
        s = kernels.forward_substitution(Bm, f)
    cache.alpha_f, cache.alpha_b, cache.gamma, cache.f = alpha_f, alpha_b, gamma, f
    cache.extra.update(q=q, k=k, v=v, qb=qb, kb=kb, B=Bm)
    return s


def _sessa_backward(cache, params, config, g_s, grads):
    abar, ex, sc = cache.abar, cache.extra, config.scale
    if config.kind == "sessa_no_feedback":
        g_f = g_s
        g_abar = np.zeros_like(abar)
    else:
        g_f, g_B = triangular_solve_adjoint(ex["B"], cache.s, g_s)
        alpha_b, gamma = cache.alpha_b, cache.gamma
        # B = gamma * alpha_b
        g_gamma = np.sum(g_B * alpha_b, axis=-1)
        g_lb = softmax_backward(alpha_b, g_B * gamma[..., None])
        g_pre = g_gamma * (1.0 - gamma * gamma)
        grads.w_gamma = np.einsum("btd,bt->d", abar, g_pre)
        grads.b_gamma = np.array(g_pre.sum())
        g_qb = sc * (g_lb @ ex["kb"])
        g_kb = sc * (g_lb.transpose(0, 2, 1) @ ex["qb"])
        grads.W_Qb = _sum_outer(abar, g_qb)
        grads.W_Kb = _sum_outer(abar, g_kb)
        g_abar = g_pre[..., None] * params.w_gamma + g_qb @ params.W_Qb.T + g_kb @ params.W_Kb.T
    # forward attention
    alpha_f, q, k, v = cache.alpha_f, ex["q"], ex["k"], ex["v"]
    g_v = alpha_f.transpose(0, 2, 1) @ g_f
    g_lf = softmax_backward(alpha_f, g_f @ v.transpose(0, 2, 1))
    g_q = rope_apply(sc * (g_lf @ k), config.rope_base, inverse=True)
    g_k = rope_apply(sc * (g_lf.transpose(0, 2, 1) @ q), config.rope_base, inverse=True)
    grads.W_V = _sum_outer(abar, g_v)
    grads.W_Qf = _sum_outer(abar, g_q)
    grads.W_Kf = _sum_outer(abar, g_k)
    g_abar += g_v @ params.W_V.T + g_q @ params.W_Qf.T + g_k @ params.W_Kf.T
    return g_abar


# registry of mixers living inside the block shell:
# kind -> (param shapes fn, forward, backward)
_MIXERS = {
    "sessa": (_sessa_shapes, _sessa_forward, _sessa_backward),
    "sessa_no_feedback": (_sessa_shapes, _sessa_forward, _sessa_backward),
}


def register_mixer(kind, shapes, forward, backward):
    if kind not in MIXER_KINDS:
        raise ConfigError(f"unknown mixer kind {kind!r}")
    _MIXERS[kind] = (shapes, forward, backward)


def _mixer(kind):
    if kind not in _MIXERS:
        from . import baselines  # noqa: F401  registers the comparator mixers
    return _MIXERS[kind]


def param_shapes(config):
    return _mixer(config.kind)[0](config)


# --------------------------------------------------------------------------
# block shell
# --------------------------------------------------------------------------

def _normalize(x, config):
    if config.norm_mode == "identity":
        return x, None
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + config.ln_eps)
    return xc * inv_std, inv_std


def layernorm_backward(xn, inv_std, g):
    """Gradient through affine-free layer normalization."""
    return inv_std * (g - g.mean(axis=-1, keepdims=True)
                      - xn * (g * xn).mean(axis=-1, keepdims=True))


def block_forward(x, params, config):
    """Evaluate one block on ``x`` of shape (T, D) or (B, T, D).

    Returns
    -------
    y : ndarray, same shape as ``x``
    cache : MixerCache
    """
    xb, single = _batched(x)
    T, D = xb.shape[1], xb.shape[2]
    if T > config.T_max:
        raise InputError(f"sequence length {T} exceeds T_max={config.T_max}")
    if D != config.D:
        raise InputError(f"token width {D} does not match D={config.D}")
    shapes_fn, fwd, _ = _mixer(config.kind)
    shapes = shapes_fn(config)
    _check_shapes(params, shapes)
    xn, inv_std = _normalize(xb, config)
    u = xn @ params.W_in + params.b_in
    a, g = u[..., :D], u[..., D:]
    abar = gelu(a)
    cache = MixerCache(config.kind, xb, xn, inv_std, a, g, abar, None,
                       single=single, param_shapes=shapes, config=config)
    s = fwd(abar, params, config, cache)
    cache.s = s
    y = xb + (s * g) @ params.W_out + params.b_out
    return _unbatch(y, single), cache


def block_backward(cache, params, g_y, config=None):
    """Reverse pass of :func:`block_forward`.

    ``config`` defaults to the one recorded in the cache.

    Returns
    -------
    g_x : ndarray, same shape as the forward input
    g_params : same type as ``params``
    """
    config = cache.config if config is None else config
    g_y = np.asarray(g_y, dtype=np.float64)
    if cache.single:
        g_y = g_y[None] if g_y.ndim == 2 else g_y
    if g_y.shape != cache.x.shape:
        raise CacheError(f"cotangent shape {g_y.shape} does not match cached {cache.x.shape}")
    if cache.kind != config.kind:
        raise CacheError(f"cache from a {cache.kind!r} block used with {config.kind!r}")
    for name, shape in cache.param_shapes.items():
        if np.shape(getattr(params, name)) != shape:
            raise CacheError(f"parameter {name} changed shape since the forward pass")
    _, _, bwd = _mixer(config.kind)
    grads = params.zeros_like()
    s, g, D = cache.s, cache.g, config.D
    z = s * g
    grads.W_out = _sum_outer(z, g_y)
    grads.b_out = g_y.sum(axis=(0, 1))
    g_z = g_y @ params.W_out.T
    g_s = g_z * g
    g_g = g_z * s
    g_abar = bwd(cache, params, config, g_s, grads)
    g_a = g_abar * gelu_prime(cache.a)
    g_u = np.concatenate([g_a, g_g], axis=-1)
    grads.W_in = _sum_outer(cache.xn, g_u)
    grads.b_in = g_u.sum(axis=(0, 1))
    g_xn = g_u @ params.W_in.T
    if config.norm_mode == "layernorm":
        g_xn = layernorm_backward(cache.xn, cache.inv_std, g_xn)
    g_x = g_y + g_xn
    return _unbatch(g_x, cache.single), grads


# --------------------------------------------------------------------------
# positional-code construction
# --------------------------------------------------------------------------

def positional_code_params(config, gamma=0.5, a_star=1.0, lam=1.0, u=None):
    """Block parameters whose output adds ``lam * c_t * u`` to every token.

    The input projection is zero and the biases pin ``a = a_star e_1`` and
    ``g = e_1``; attention logits vanish (uniform routing), the gain is the
    constant ``gamma`` and ``W_V`` rescales so that every value is ``e_1``.
    The solve then produces ``c_t = 1 + (gamma/t) sum_{j<t} c_j``.
    """
    if config.kind != "sessa":
        raise ConfigError("positional code needs the full Sessa mixer")
    if not 0 < abs(gamma) < 1:
        raise ConfigError("gamma must lie in (-1, 1) and be non-zero")
    D = config.D
    p = BlockParams.zeros(config)
    p.b_in[0] = a_star
    p.b_in[D] = 1.0
    p.W_V[0, 0] = 1.0 / float(gelu(a_star))
    p.b_gamma = np.array(math.atanh(gamma))
    u = np.eye(D)[0] if u is None else np.asarray(u, dtype=np.float64)
    p.W_out[0] = lam * u
    return p


def positional_code(T, gamma=0.5):
    """Reference recursion ``c_0 = 1``, ``c_t = 1 + (gamma/t) sum_{j<t} c_j``."""
    c = np.empty(T)
    acc = 0.0
    for t in range(T):
        c[t] = 1.0 + (gamma / t) * acc if t else 1.0
        acc += c[t]
    return c
