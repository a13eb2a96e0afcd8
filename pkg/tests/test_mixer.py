import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sessa_lab import CacheError, ConfigError, InputError
from sessa_lab.mixer import (
    BlockParams,
    FeedbackMatrix,
    MixerConfig,
    active_param_count,
    block_backward,
    block_forward,
    build_feedback,
    forward_attention,
    positional_code,
    positional_code_params,
    triangular_solve,
    triangular_solve_adjoint,
)
from sessa_lab.numerics import gelu, rope_frequencies


def small_block(seed, D=4, d_k=4, T_max=16, norm_mode="identity", kind="sessa", b_gamma=-0.5):
    cfg = MixerConfig(D=D, d_k=d_k, T_max=T_max, norm_mode=norm_mode, kind=kind)
    rng = np.random.default_rng(seed)
    if kind == "sessa" or kind == "sessa_no_feedback":
        p = BlockParams.init(cfg, rng, b_gamma=b_gamma)
    else:
        from sessa_lab.baselines import AttentionBlockParams, ZohBlockParams
        cls = AttentionBlockParams if kind == "attention" else ZohBlockParams
        p = cls.init(cfg, rng)
    p.b_in = 0.1 * rng.standard_normal(p.b_in.shape)
    p.b_out = 0.1 * rng.standard_normal(p.b_out.shape)
    return cfg, p, rng


def random_feedback(rng, T, rho=0.9):
    alpha = np.tril(rng.random((T, T)), k=-1)
    rows = alpha.sum(axis=1, keepdims=True)
    alpha = np.divide(alpha, rows, out=np.zeros_like(alpha), where=rows > 0)
    gamma = rho * rng.uniform(-1, 1, T)
    return FeedbackMatrix(gamma[:, None] * alpha, gamma)


def fd_grad(fn, arr, h=1e-5):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = fn()
        arr[i] = old - h
        fm = fn()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestConfig:
    def test_odd_dk_rejected(self):
        with pytest.raises(ConfigError):
            MixerConfig(D=4, d_k=3, T_max=8)

    def test_bad_norm_mode(self):
        with pytest.raises(ConfigError):
            MixerConfig(D=4, d_k=4, T_max=8, norm_mode="batchnorm")

    def test_layernorm_needs_eps(self):
        with pytest.raises(ConfigError):
            MixerConfig(D=4, d_k=4, T_max=8, norm_mode="layernorm", ln_eps=0.0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            MixerConfig(D=4, d_k=4, T_max=8, kind="rnn")

    def test_too_long_sequence(self):
        cfg, p, rng = small_block(0, T_max=4)
        with pytest.raises(InputError):
            block_forward(rng.standard_normal((5, 4)), p, cfg)

    def test_wrong_param_shape(self):
        cfg, p, rng = small_block(0)
        p.W_V = np.zeros((3, 3))
        with pytest.raises(InputError):
            block_forward(rng.standard_normal((5, 4)), p, cfg)

    def test_non_finite_input(self):
        cfg, p, _ = small_block(0)
        x = np.zeros((3, 4))
        x[1, 2] = np.nan
        with pytest.raises(InputError):
            block_forward(x, p, cfg)


class TestFeedback:
    def test_uniform_rows_with_zero_projections(self, rng):
        cfg = MixerConfig(D=4, d_k=4, T_max=8)
        p = BlockParams.zeros(cfg)
        alpha, gamma, B = build_feedback(rng.standard_normal((4, 4)), p, cfg)
        expected = np.tril(np.ones((4, 4)), k=-1)
        expected[1:] /= np.arange(1, 4)[:, None]
        np.testing.assert_allclose(alpha, expected, atol=1e-15)
        assert np.all(alpha[0] == 0)

    def test_constant_gain(self, rng):
        cfg = MixerConfig(D=4, d_k=4, T_max=8)
        p = BlockParams.zeros(cfg)
        p.b_gamma = np.array(math.atanh(0.5))
        _, gamma, _ = build_feedback(rng.standard_normal((6, 4)), p, cfg)
        np.testing.assert_allclose(gamma, 0.5, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_row_sums_equal_gains(self, seed):
        cfg, p, rng = small_block(seed, T_max=32)
        abar = gelu(rng.standard_normal((32, 4)))
        _, gamma, B = build_feedback(abar, p, cfg)
        sums = np.abs(B.entries).sum(axis=1)
        np.testing.assert_allclose(sums[1:], np.abs(gamma[1:]), atol=1e-12)
        assert sums[0] == 0
        assert B.contraction() < 1
        B.validate()

    def test_validate_rejects_upper_entries(self):
        B = FeedbackMatrix(np.triu(np.full((3, 3), 0.1)), np.full(3, 0.1))
        with pytest.raises(InputError):
            B.validate()

    def test_batched_matches_single(self, rng):
        cfg, p, _ = small_block(3)
        abar = rng.standard_normal((2, 5, 4))
        a2, g2, B2 = build_feedback(abar, p, cfg)
        for b in range(2):
            a1, g1, B1 = build_feedback(abar[b], p, cfg)
            np.testing.assert_array_equal(a1, a2[b])
            np.testing.assert_array_equal(B1.entries, B2.entries[b])


class TestForwardAttention:
    def test_zero_logits_give_running_mean(self, rng):
        cfg = MixerConfig(D=4, d_k=4, T_max=8)
        p = BlockParams.zeros(cfg)
        p.W_V = rng.standard_normal((4, 4))
        abar = rng.standard_normal((6, 4))
        f = forward_attention(abar, p, cfg)
        v = abar @ p.W_V
        mean = np.cumsum(v, axis=0) / np.arange(1, 7)[:, None]
        np.testing.assert_allclose(f, mean, atol=1e-14)
        np.testing.assert_allclose(f[0], v[0], atol=1e-15)

    def test_rows_are_probability_vectors(self, rng):
        cfg, p, _ = small_block(1, T_max=16)
        _, alpha = forward_attention(rng.standard_normal((16, 4)), p, cfg, return_weights=True)
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-14)
        assert np.all(np.triu(alpha, k=1) == 0)

    def test_diagonal_concentration(self, rng):
        # q = k = c u in the slowest RoPE plane: logit(t, j) = sigma c^2 cos((t-j) w)
        T, d_k, delta = 64, 4, 1e-3
        cfg = MixerConfig(D=4, d_k=d_k, T_max=T)
        w = rope_frequencies(d_k, cfg.rope_base)[-1]
        margin = np.min(1.0 - np.cos(np.arange(1, T) * w))
        c = math.sqrt(math.log((T - 1) / delta) / (cfg.scale * margin))
        p = BlockParams.zeros(cfg)
        p.W_Qf[0, 2] = p.W_Kf[0, 2] = c
        p.W_V = rng.standard_normal((4, 4))
        abar = np.zeros((T, 4))
        abar[:, 0] = 1.0
        abar[:, 1:] = rng.standard_normal((T, 3))
        f, alpha = forward_attention(abar, p, cfg, return_weights=True)
        assert np.min(np.diag(alpha)) >= 1 - delta
        v = abar @ p.W_V
        vmax = np.max(np.linalg.norm(v, axis=1))
        assert np.max(np.linalg.norm(f - v, axis=1)) <= 2 * delta * vmax


class TestSolve:
    def test_zero_feedback_is_identity(self, rng):
        f = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(triangular_solve(np.zeros((5, 5)), f), f)

    def test_hand_recursion(self):
        B = 0.5 * np.array([[0, 0, 0], [1, 0, 0], [0.5, 0.5, 0]])
        s = triangular_solve(B, np.array([[1.0], [0.0], [0.0]]))
        np.testing.assert_allclose(s[:, 0], [1.0, 0.5, 0.375], atol=1e-15)

    @pytest.mark.parametrize("T", [1, 2, 7, 16])
    def test_matches_neumann_series(self, rng, T):
        B = random_feedback(rng, T)
        f = rng.standard_normal((T, 3))
        s = triangular_solve(B, f)
        neumann = np.zeros_like(f)
        term = f.copy()
        for _ in range(T):
            neumann += term
            term = B.entries @ term
        np.testing.assert_allclose(s, neumann, atol=1e-12)
        resid = f - (s - B.entries @ s)
        assert np.max(np.abs(resid)) <= 1e-12 * np.max(np.abs(f))

    def test_stability_bound(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            T = int(rng.integers(1, 24))
            rho = rng.uniform(0, 0.99)
            B = random_feedback(rng, T, rho)
            f = rng.standard_normal((T, 3))
            s = triangular_solve(B, f)
            gmax = np.max(np.abs(B.row_gains))
            bound = np.max(np.linalg.norm(f, axis=1)) / (1 - gmax)
            assert np.max(np.linalg.norm(s, axis=1)) <= bound * (1 + 1e-12)

    def test_adjoint_zero_feedback(self, rng):
        s, g_s = rng.standard_normal((2, 4, 3))
        g_f, g_B = triangular_solve_adjoint(np.zeros((4, 4)), s, g_s)
        np.testing.assert_array_equal(g_f, g_s)
        np.testing.assert_allclose(g_B, np.tril(g_s @ s.T, k=-1), atol=1e-15)

    @pytest.mark.parametrize("seed", range(4))
    def test_adjoint_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        T = 6
        B = random_feedback(rng, T).entries
        f = rng.standard_normal((T, 3))
        w = rng.standard_normal((T, 3))
        loss = lambda: float(np.sum(w * triangular_solve(B, f)))
        g_f, g_B = triangular_solve_adjoint(B, triangular_solve(B, f), w)
        assert rel_err(g_f, fd_grad(loss, f)) <= 1e-7
        fd_B = np.tril(fd_grad(loss, B), k=-1)
        assert rel_err(g_B, fd_B) <= 1e-6

    def test_adjoint_shape_check(self):
        with pytest.raises(InputError):
            triangular_solve_adjoint(np.zeros((3, 3)), np.zeros((3, 2)), np.zeros((4, 2)))


class TestBlock:
    def test_zero_block_is_identity(self, rng):
        cfg = MixerConfig(D=4, d_k=4, T_max=8)
        x = rng.standard_normal((8, 4))
        y, _ = block_forward(x, BlockParams.zeros(cfg), cfg)
        np.testing.assert_array_equal(y, x)

    def test_positional_code(self, rng):
        cfg = MixerConfig(D=4, d_k=4, T_max=32)
        lam = 0.7
        u = rng.standard_normal(4)
        p = positional_code_params(cfg, gamma=0.5, lam=lam, u=u)
        x = rng.standard_normal((32, 4))
        y, _ = block_forward(x, p, cfg)
        c = positional_code(32, 0.5)
        np.testing.assert_allclose(c[:3], [1.0, 1.5, 1.625], atol=1e-15)
        np.testing.assert_allclose(y - x, lam * c[:, None] * u, atol=1e-12)

    def test_positional_code_monotone_and_partial_sums(self):
        # code partial sums are the superposition sum_{tau<=t} S_t / S_tau
        # of impulse partial sums S_t = prod_{i<=t} (1 + gamma/i)
        for gamma in (0.25, 0.5, 0.9):
            c = positional_code(200, gamma)
            assert np.all(np.diff(c) > 0)
            S = np.exp([math.lgamma(k + 1 + gamma) - math.lgamma(1 + gamma) - math.lgamma(k + 1)
                        for k in range(200)])
            np.testing.assert_allclose(S[1:] / S[:-1], 1 + gamma / np.arange(1, 200), rtol=1e-12)
            np.testing.assert_allclose(np.cumsum(c), S * np.cumsum(1 / S), rtol=1e-10)

    def test_positional_code_needs_sessa(self):
        with pytest.raises(ConfigError):
            positional_code_params(MixerConfig(D=4, d_k=4, T_max=8, kind="attention"))
        with pytest.raises(ConfigError):
            positional_code_params(MixerConfig(D=4, d_k=4, T_max=8), gamma=1.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_ball_to_ball_bound(self, seed):
        cfg, p, rng = small_block(seed, T_max=24)
        x = rng.standard_normal((24, 4))
        y, cache = block_forward(x, p, cfg)
        R = np.max(np.linalg.norm(x, axis=1))
        F = np.max(np.linalg.norm(cache.f[0], axis=1))
        G = np.max(np.linalg.norm(cache.g[0], axis=1))
        rho = np.max(np.abs(cache.gamma))
        bound = R + np.linalg.norm(p.W_out, 2) * F * G / (1 - rho) + np.linalg.norm(p.b_out)
        assert np.max(np.linalg.norm(y, axis=1)) <= bound

    @pytest.mark.parametrize("kind", ["sessa", "sessa_no_feedback", "attention", "zoh_ssm"])
    @pytest.mark.parametrize("norm_mode", ["identity", "layernorm"])
    def test_causality(self, kind, norm_mode):
        cfg, p, rng = small_block(11, kind=kind, norm_mode=norm_mode)
        x = rng.standard_normal((12, 4))
        y, _ = block_forward(x, p, cfg)
        for t in (0, 5, 10):
            x2 = x.copy()
            x2[t + 1:] += rng.standard_normal((11 - t, 4))
            y2, _ = block_forward(x2, p, cfg)
            np.testing.assert_array_equal(y2[:t + 1], y[:t + 1])

    def test_batched_equals_per_sequence(self, rng):
        cfg, p, _ = small_block(2)
        x = rng.standard_normal((3, 7, 4))
        yb, _ = block_forward(x, p, cfg)
        for b in range(3):
            np.testing.assert_allclose(block_forward(x[b], p, cfg)[0], yb[b], atol=1e-14)

    def test_ablation_ignores_feedback_params(self, rng):
        cfg, p, _ = small_block(4, kind="sessa_no_feedback")
        x = rng.standard_normal((6, 4))
        y, _ = block_forward(x, p, cfg)
        q = p.copy()
        q.W_Qb += 1.0
        q.w_gamma += 1.0
        np.testing.assert_array_equal(block_forward(x, q, cfg)[0], y)
        assert active_param_count(p, cfg) == p.num_params() - 4 * 4 * 2 - 4 - 1


class TestBackward:
    def test_zero_cotangent(self, rng):
        cfg, p, _ = small_block(0)
        x = rng.standard_normal((5, 4))
        _, cache = block_forward(x, p, cfg)
        g_x, g_p = block_backward(cache, p, np.zeros_like(x))
        assert not np.any(g_x)
        assert all(not np.any(v) for _, v in g_p.items())

    def test_linear_in_cotangent(self, rng):
        cfg, p, _ = small_block(0)
        x = rng.standard_normal((5, 4))
        _, cache = block_forward(x, p, cfg)
        g1, g2 = rng.standard_normal((2, 5, 4))
        a = block_backward(cache, p, g1)[0] + 2 * block_backward(cache, p, g2)[0]
        np.testing.assert_allclose(block_backward(cache, p, g1 + 2 * g2)[0], a, atol=1e-12)

    def test_stale_cache(self, rng):
        cfg, p, _ = small_block(0)
        _, cache = block_forward(rng.standard_normal((5, 4)), p, cfg)
        with pytest.raises(CacheError):
            block_backward(cache, p, np.zeros((6, 4)))
        q = p.copy()
        q.W_V = np.zeros((4, 5))
        with pytest.raises(CacheError):
            block_backward(cache, q, np.zeros((5, 4)))
        other = MixerConfig(D=4, d_k=4, T_max=16, kind="sessa_no_feedback")
        with pytest.raises(CacheError):
            block_backward(cache, p, np.zeros((5, 4)), other)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_finite_differences(self, seed):
        kinds = ("sessa", "sessa", "sessa_no_feedback", "attention", "zoh_ssm")
        kind = kinds[seed % len(kinds)]
        norm_mode = "layernorm" if seed % 2 else "identity"
        cfg, p, rng = small_block(seed, T_max=5, kind=kind, norm_mode=norm_mode)
        x = rng.standard_normal((5, 4))
        w = rng.standard_normal((5, 4))
        loss = lambda: float(np.sum(w * block_forward(x, p, cfg)[0]))
        _, cache = block_forward(x, p, cfg)
        g_x, g_p = block_backward(cache, p, w)
        assert rel_err(g_x, fd_grad(loss, x)) <= 1e-6
        for name, arr in p.items():
            if kind == "sessa_no_feedback" and name in ("W_Qb", "W_Kb", "w_gamma", "b_gamma"):
                continue
            fd = fd_grad(loss, arr)
            an = np.reshape(getattr(g_p, name), fd.shape)
            if np.linalg.norm(fd) < 1e-9:
                assert np.linalg.norm(an) < 1e-8, name
            else:
                assert rel_err(an, fd) <= 1e-6, name


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_forward_rows_stochastic(seed, T):
    cfg, p, rng = small_block(seed, T_max=12)
    _, cache = block_forward(rng.standard_normal((T, 4)), p, cfg)
    np.testing.assert_allclose(cache.alpha_f[0].sum(axis=1), 1.0, atol=1e-13)
    sums = cache.alpha_b[0].sum(axis=1)
    np.testing.assert_allclose(sums[1:], 1.0, atol=1e-13)
    assert sums[0] == 0
    assert np.all(np.abs(cache.gamma) < 1)
