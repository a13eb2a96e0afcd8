"""Comparator mixers that plug into the same block shell as Sessa.

``attention``: multi-head causal softmax attention with RoPE.
``zoh_ssm``: a diagonal selective state-space layer with zero-order-hold
discretization, ``h_t = exp(-a Delta_t) h_{t-1} + ((1 - exp(-a Delta_t))/a) B_t u_t``,
``s_t = <C_t, h_t>`` per channel, with ``u = abar``.
"""
from dataclasses import dataclass
import math

import numpy as np

from . import kernels
from .mixer import register_mixer
from .numerics import causal_mask, masked_softmax, rope_apply, softmax_backward
from .params import ParamSet, gaussian


def _sum_outer(x, g):
    return np.einsum("btd,bte->de", x, g)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# --------------------------------------------------------------------------
# multi-head attention
# --------------------------------------------------------------------------

@dataclass
class AttentionBlockParams(ParamSet):
    W_in: np.ndarray
    b_in: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    @classmethod
    def zeros(cls, config):
        D, da = config.D, config.n_heads * config.head_width
        return cls(np.zeros((D, 2 * D)), np.zeros(2 * D), np.zeros((D, da)),
                   np.zeros((D, da)), np.zeros((D, D)), np.zeros((D, D)), np.zeros(D))

    @classmethod
    def init(cls, config, rng):
        D = config.D
        p = cls.zeros(config)
        for name in ("W_in", "W_Q", "W_K", "W_V", "W_out"):
            setattr(p, name, gaussian(rng, D, getattr(p, name).shape))
        return p


def _attention_shapes(config):
    D, da = config.D, config.n_heads * config.head_width
    return {"W_in": (D, 2 * D), "b_in": (2 * D,), "W_Q": (D, da), "W_K": (D, da),
            "W_V": (D, D), "W_out": (D, D), "b_out": (D,)}


def _heads(x, H):
    # (B, T, H*w) -> (B, H, T, w)
    Bsz, T, W = x.shape
    return x.reshape(Bsz, T, H, W // H).transpose(0, 2, 1, 3)


def _merge(x):
    Bsz, H, T, w = x.shape
    return x.transpose(0, 2, 1, 3).reshape(Bsz, T, H * w)


def _attention_forward(abar, params, config, cache):
    H, T = config.n_heads, abar.shape[1]
    sc = 1.0 / math.sqrt(config.head_width)
    q = rope_apply(_heads(abar @ params.W_Q, H), config.rope_base)
    k = rope_apply(_heads(abar @ params.W_K, H), config.rope_base)
    v = _heads(abar @ params.W_V, H)
    alpha = masked_softmax(sc * (q @ np.swapaxes(k, -1, -2)), causal_mask(T))
    cache.alpha_f = alpha
    cache.extra.update(q=q, k=k, v=v)
    return _merge(alpha @ v)


def _attention_backward(cache, params, config, g_s, grads):
    H = config.n_heads
    sc = 1.0 / math.sqrt(config.head_width)
    abar, alpha, ex = cache.abar, cache.alpha_f, cache.extra
    q, k, v = ex["q"], ex["k"], ex["v"]
    g_o = _heads(g_s, H)
    g_v = np.swapaxes(alpha, -1, -2) @ g_o
    g_l = softmax_backward(alpha, g_o @ np.swapaxes(v, -1, -2))
    g_q = _merge(rope_apply(sc * (g_l @ k), config.rope_base, inverse=True))
    g_k = _merge(rope_apply(sc * (np.swapaxes(g_l, -1, -2) @ q), config.rope_base, inverse=True))
    g_v = _merge(g_v)
    grads.W_Q = _sum_outer(abar, g_q)
    grads.W_K = _sum_outer(abar, g_k)
    grads.W_V = _sum_outer(abar, g_v)
    return g_q @ params.W_Q.T + g_k @ params.W_K.T + g_v @ params.W_V.T


# --------------------------------------------------------------------------
# diagonal ZOH selective SSM
# --------------------------------------------------------------------------

@dataclass
class ZohBlockParams(ParamSet):
    W_in: np.ndarray
    b_in: np.ndarray
    W_delta: np.ndarray
    b_delta: np.ndarray
    W_B: np.ndarray
    W_C: np.ndarray
    A_log: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    @classmethod
    def zeros(cls, config):
        D, N = config.D, config.state_width
        return cls(np.zeros((D, 2 * D)), np.zeros(2 * D), np.zeros((D, D)), np.zeros(D),
                   np.zeros((D, N)), np.zeros((D, N)), np.zeros((D, N)),
                   np.zeros((D, D)), np.zeros(D))

    @classmethod
    def init(cls, config, rng, dt_min=1e-3, dt_max=1e-1):
        """Gaussian projections; rates ``a_n = n`` and step sizes log-uniform in [dt_min, dt_max]."""
        D, N = config.D, config.state_width
        p = cls.zeros(config)
        for name in ("W_in", "W_delta", "W_B", "W_C", "W_out"):
            setattr(p, name, gaussian(rng, D, getattr(p, name).shape))
        p.W_delta *= 0.1
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), D))
        p.b_delta = np.log(np.expm1(dt))
        p.A_log = np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (D, 1))
        return p


def _zoh_shapes(config):
    D, N = config.D, config.state_width
    return {"W_in": (D, 2 * D), "b_in": (2 * D,), "W_delta": (D, D), "b_delta": (D,),
            "W_B": (D, N), "W_C": (D, N), "A_log": (D, N), "W_out": (D, D), "b_out": (D,)}


def _zoh_forward(abar, params, config, cache):
    pre = abar @ params.W_delta + params.b_delta
    delta = _softplus(pre)                                 # (B, T, D)
    a = np.exp(params.A_log)                               # (D, N)
    decay = np.exp(-delta[..., None] * a)                  # (B, T, D, N)
    G = -np.expm1(-delta[..., None] * a) / a               # (1 - decay)/a
    Bt = abar @ params.W_B                                 # (B, T, N)
    Ct = abar @ params.W_C
    inject = G * Bt[:, :, None, :] * abar[..., None]
    h = kernels.linear_scan(decay, inject)
    cache.extra.update(pre=pre, delta=delta, a=a, decay=decay, G=G, Bt=Bt, Ct=Ct, h=h)
    return np.einsum("btdn,btn->btd", h, Ct)


def _zoh_backward(cache, params, config, g_s, grads):
    ex, abar = cache.extra, cache.abar
    delta, a, decay, G, Bt, Ct, h = (ex[k] for k in ("delta", "a", "decay", "G", "Bt", "Ct", "h"))
    g_Ct = np.einsum("btd,btdn->btn", g_s, h)
    g_h = g_s[..., None] * Ct[:, :, None, :]
    g_decay, g_inject = kernels.linear_scan_adjoint(decay, h, g_h)
    BU = Bt[:, :, None, :] * abar[..., None]
    g_G = g_inject * BU
    g_Bt = np.einsum("btdn,btdn,btd->btn", g_inject, G, abar)
    g_abar = np.einsum("btdn,btdn,btn->btd", g_inject, G, Bt)
    # decay = exp(-delta a), G = (1 - decay)/a
    d = delta[..., None]
    g_delta = np.sum(-g_decay * a * decay + g_G * decay, axis=-1)
    g_a = np.sum(-g_decay * d * decay + g_G * (d * decay / a - G / a), axis=(0, 1))
    grads.A_log = g_a * a
    g_pre = g_delta * _sigmoid(ex["pre"])
    grads.W_delta = _sum_outer(abar, g_pre)
    grads.b_delta = g_pre.sum(axis=(0, 1))
    grads.W_B = _sum_outer(abar, g_Bt)
    grads.W_C = _sum_outer(abar, g_Ct)
    g_abar += g_pre @ params.W_delta.T + g_Bt @ params.W_B.T + g_Ct @ params.W_C.T
    return g_abar


register_mixer("attention", _attention_shapes, _attention_forward, _attention_backward)
register_mixer("zoh_ssm", _zoh_shapes, _zoh_forward, _zoh_backward)
