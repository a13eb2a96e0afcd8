import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sessa_lab import CheckFailure, DomainError, InputError, RegimeError
from sessa_lab import kernels
from sessa_lab.numerics import fit_power_law
from sessa_lab.theory import (
    ImpulseSeries,
    KernelSpec,
    RoutingSpec,
    brute_force_path_sum,
    capped_rows,
    convolution_exponent,
    deep_path_sum_bound,
    gautschi_bracket,
    heavy_tail_convolution,
    impulse_response,
    nested_harmonic_bound,
    poly_decay_check,
    poly_decay_constant,
    positional_code_check,
    random_admissible_spec,
    resolvent_factor_bounds,
    resolvent_kernel,
    transport_exponent_check,
    two_sided_constants,
    two_sided_tail_check,
    uniform_closed_form,
    uniform_resolvent,
    write_envelope_csv,
)


class TestRoutingSpec:
    def test_uniform_routing_rows(self):
        B = RoutingSpec.uniform(0.5).routing(5)
        np.testing.assert_allclose(B[3], [0.5 / 3] * 3 + [0, 0])
        assert np.all(B[0] == 0)

    def test_bad_gain(self):
        with pytest.raises(DomainError):
            RoutingSpec.uniform(1.0)

    def test_explicit_must_be_strictly_lower(self):
        with pytest.raises(InputError):
            RoutingSpec.explicit(np.eye(3), 0.5)

    def test_envelope_has_no_routing(self):
        spec = RoutingSpec("envelope", "bound", c2=2.0, gamma_max=0.3)
        assert spec.beta_tail == pytest.approx(0.4)
        with pytest.raises(InputError):
            spec.routing(4)

    def test_capped_rows_respect_cap(self, rng):
        T = 40
        a = capped_rows(np.exp(3 * rng.standard_normal((T, T))), 2.0)
        t = np.arange(T)
        np.testing.assert_allclose(a[1:].sum(axis=1), 1.0, atol=1e-12)
        assert np.all(a[1:] <= 2.0 / t[1:, None] + 1e-12)
        with pytest.raises(DomainError):
            capped_rows(np.ones((3, 3)), 0.5)


class TestImpulse:
    def test_zero_gain_is_trivial(self):
        y = impulse_response(RoutingSpec.explicit(np.tril(np.full((6, 6), 0.2), -1), 0.0), 1, 6)
        np.testing.assert_array_equal(y.tail(), [1, 0, 0, 0, 0])

    def test_hand_recursion(self):
        y = impulse_response(RoutingSpec.uniform(0.5), 0, 4).tail()
        np.testing.assert_allclose(y, [1.0, 0.5, 0.375, 0.3125], atol=1e-15)

    @pytest.mark.parametrize("tau", [0, 1, 5, 30])
    @pytest.mark.parametrize("gamma", [0.1, 0.5, 0.9])
    def test_first_lag(self, tau, gamma):
        y = impulse_response(RoutingSpec.uniform(gamma), tau, tau + 3)
        assert y.at(1) == pytest.approx(gamma / (tau + 1), rel=1e-15)
        assert y.at(0) == 1.0
        assert np.all(y.full()[:tau] == 0)

    def test_bad_source(self):
        with pytest.raises(InputError):
            impulse_response(RoutingSpec.uniform(0.5), 4, 4)

    def test_uniform_fast_path_matches_dense_solve(self):
        T = 64
        spec = RoutingSpec.uniform(0.7)
        dense = kernels.forward_substitution(spec.routing(T), np.eye(T)[:, [3]])[3:, 0]
        np.testing.assert_allclose(impulse_response(spec, 3, T).tail(), dense, rtol=1e-13)

    def test_monotone_comparison(self):
        # the envelope recursion with alpha -> c2/t and gamma -> gamma_max dominates
        rng = np.random.default_rng(3)
        T, c2, gmax = 80, 2.0, 0.4
        t = np.arange(T, dtype=np.float64)
        comp = np.tril(np.ones((T, T)), -1) * (gmax * c2 / np.maximum(t, 1))[:, None]
        for _ in range(20):
            spec = random_admissible_spec(rng, T, c2, gmax)
            for tau in (0, 7):
                y = impulse_response(spec, tau, T).tail()
                f = np.zeros((T, 1))
                f[tau] = 1
                ytil = kernels.forward_substitution(comp, f)[tau:, 0]
                assert np.all(np.abs(y) <= ytil * (1 + 1e-12))


class TestClosedForm:
    def test_examples(self):
        assert uniform_closed_form(0.5, 0, 2) == pytest.approx(0.375, rel=1e-14)
        for tau in range(6):
            assert uniform_closed_form(0.3, tau, 1) == pytest.approx(0.3 / (tau + 1), rel=1e-14)

    def test_tau_zero_form(self):
        g, t = 0.4, np.arange(1, 50)
        ref = g / math.gamma(1 + g) * np.exp([math.lgamma(k + g) - math.lgamma(k + 1) for k in t])
        np.testing.assert_allclose(uniform_closed_form(g, 0, t), ref, rtol=1e-12)

    def test_domain(self):
        with pytest.raises(DomainError):
            uniform_closed_form(1.0, 0, 1)
        with pytest.raises(DomainError):
            uniform_closed_form(0.5, 0, 0)

    @pytest.mark.parametrize("gamma", np.round(np.arange(0.1, 1.0, 0.1), 1))
    def test_matches_recursion(self, gamma):
        ell = np.arange(1, 2049)
        for tau in range(9):
            y = impulse_response(RoutingSpec.uniform(gamma), tau, tau + 2049).tail()[1:]
            np.testing.assert_allclose(uniform_closed_form(gamma, tau, ell), y, rtol=1e-12)

    def test_gautschi_sandwich(self):
        t = np.arange(1, 3000, dtype=np.float64)
        for g in (0.1, 0.5, 0.9):
            lo, hi = gautschi_bracket(t, g)
            r = np.exp([math.lgamma(k + g) - math.lgamma(k + 1) for k in t])
            assert np.all(lo <= r * (1 + 1e-13)) and np.all(r <= hi * (1 + 1e-13))


class TestPolyDecay:
    def test_constant(self):
        assert poly_decay_constant(0.5) == pytest.approx(0.5 * math.exp(0.5))
        assert poly_decay_constant(0.5) == pytest.approx(0.8244, abs=1e-4)

    def test_uniform_half(self):
        rep = poly_decay_check(impulse_response(RoutingSpec.uniform(0.5), 0, 4096))
        assert rep.ok and rep.max_violation <= 1
        assert rep.C_used == pytest.approx(0.8244, abs=1e-4)

    def test_zero_series(self):
        rep = poly_decay_check(ImpulseSeries(0, np.r_[1.0, np.zeros(20)], 1.0))
        assert rep.ok and rep.max_violation == 0

    def test_random_admissible(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            spec = random_admissible_spec(rng, 128, 2.0, 0.4)
            tau = int(rng.integers(0, 16))
            series = impulse_response(spec, tau, 128)
            rep = poly_decay_check(series, beta=0.2)
            assert rep.ok

    def test_violation_reported(self):
        series = ImpulseSeries(0, np.array([1.0, 0.5, 0.9, 0.1]), 0.5)
        rep = poly_decay_check(series, strict=False)
        assert not rep.ok and rep.first_violation == 2
        with pytest.raises(CheckFailure) as exc:
            poly_decay_check(series)
        assert exc.value.report.first_violation == 2

    def test_supercritical_rejected(self):
        spec = RoutingSpec("explicit", "constant", alpha=np.tril(np.full((4, 4), 0.3), -1),
                           gamma=0.9, c2=1.0)
        series = impulse_response(spec, 0, 4)
        series.beta_tail = None
        with pytest.raises(RegimeError):
            poly_decay_check(series)

    def test_csv_columns(self):
        rep = poly_decay_check(impulse_response(RoutingSpec.uniform(0.5), 0, 8))
        buf = io.StringIO()
        write_envelope_csv(buf, rep)
        rows = list(csv.reader(io.StringIO(buf.getvalue())))
        assert rows[0] == ["lag", "value", "envelope", "violated"]
        assert len(rows) == 8 and rows[1][0] == "1"


class TestTwoSided:
    def test_tau_zero_constants(self):
        cm, cp = two_sided_constants(0.5, 0)
        assert cp == pytest.approx(0.5 / math.gamma(1.5), rel=1e-13)
        assert cm == pytest.approx(cp * 2 ** -0.5, rel=1e-13)

    def test_half_gain(self):
        rep = two_sided_tail_check(0.5, 4, 1024, fit_window=(64, 1024))
        assert rep.ok
        cm, _ = two_sided_constants(0.5, 4)
        assert rep.c_minus == cm
        assert len(rep.exponents) == 5
        assert all(abs(e + 0.5) <= 0.03 for e in rep.exponents)

    @pytest.mark.parametrize("gamma", [0.2, 0.8])
    def test_other_gains(self, gamma):
        assert two_sided_tail_check(gamma, 3, 512).ok

    def test_domain(self):
        with pytest.raises(DomainError):
            two_sided_tail_check(0.0, 2, 10)


class TestResolvent:
    def test_zero(self):
        np.testing.assert_array_equal(resolvent_kernel(np.zeros((4, 4))), np.eye(4))

    def test_uniform_column(self):
        Th = resolvent_kernel(RoutingSpec.uniform(0.5).routing(4))
        np.testing.assert_allclose(Th[:, 0], [1, 0.5, 0.375, 0.3125], atol=1e-15)

    def test_matches_neumann_and_closed_form(self):
        T = 16
        B = RoutingSpec.uniform(0.6).routing(T)
        N = sum(np.linalg.matrix_power(B, k) for k in range(T))
        Th = resolvent_kernel(B)
        np.testing.assert_allclose(Th, N, atol=1e-13)
        np.testing.assert_allclose(Th, uniform_resolvent(0.6, T), rtol=1e-10)

    def test_columns_are_impulses(self, rng):
        spec = random_admissible_spec(rng, 30, 1.5, 0.5)
        Th = resolvent_kernel(spec.routing(30))
        for tau in (0, 4, 29):
            np.testing.assert_array_equal(Th[tau:, tau], impulse_response(spec, tau, 30).tail())

    @pytest.mark.parametrize("gamma", [0.2, 0.5, 0.9])
    def test_factorized_bounds(self, gamma):
        T = 300
        Th = uniform_resolvent(gamma, T)
        cm, cp = resolvent_factor_bounds(gamma)
        i, k = np.tril_indices(T, -1)
        scaled = Th[i, k] * (k + 1.0) ** gamma * (i + 1.0) ** (1 - gamma)
        assert scaled.min() >= cm * (1 - 1e-12)
        assert scaled.max() <= cp * (1 + 1e-12)

    def test_rejects_upper(self):
        with pytest.raises(InputError):
            resolvent_kernel(np.ones((3, 3)))


class TestHeavyTail:
    def test_small_values(self):
        f = heavy_tail_convolution(0.37, 2, 5)
        assert f[0] == f[1] == 0 and f[2] == 1.0
        assert heavy_tail_convolution(0.5, 2, 3)[3] == pytest.approx(2 * 2 ** -0.5, abs=1e-15)
        f3 = heavy_tail_convolution(0.5, 3, 8)
        assert np.all(f3[:3] == 0) and f3[3] == 1.0

    def test_matches_direct_sum(self):
        b, n_max = 0.4, 30
        f = heavy_tail_convolution(b, 3, n_max)
        a = lambda m: m ** -b
        for n in (3, 10, 30):
            ref = sum(a(m1) * a(m2) * a(n - m1 - m2)
                      for m1 in range(1, n) for m2 in range(1, n - m1))
            assert f[n] == pytest.approx(ref, rel=1e-13)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.05, 0.95), st.integers(2, 60))
    def test_order_symmetry(self, beta, n):
        m = np.arange(1, n)
        fwd = np.sum(m ** -beta * (n - m) ** -beta)
        rev = np.sum((n - m) ** -beta * m ** -beta)
        assert heavy_tail_convolution(beta, 2, n)[n] == pytest.approx(fwd, rel=1e-12)
        assert fwd == pytest.approx(rev, rel=1e-14)

    @pytest.mark.parametrize("k,beta", [(2, 0.5), (2, 0.3), (3, 0.5)])
    def test_fitted_exponent(self, k, beta):
        fit = fit_power_law(heavy_tail_convolution(beta, k, 4096), (64, 4096))
        assert abs(fit.exponent - convolution_exponent(beta, k)) <= 0.05

    def test_domain(self):
        with pytest.raises(DomainError):
            heavy_tail_convolution(1.0, 2, 10)
        with pytest.raises(DomainError):
            heavy_tail_convolution(0.5, 3, 2)


class TestTransport:
    def test_single_layer_decays(self):
        rep = transport_exponent_check(1, 0.5, H=256)
        assert rep.nu == -0.5 and rep.profile == "decaying"
        assert rep.margin_ok

    def test_frozen_profile(self):
        rep = transport_exponent_check(2, 0.5, H=512)
        assert rep.profile == "frozen"
        assert abs(rep.fitted_nu) <= 0.05 and rep.margin_ok

    def test_increasing_profile(self):
        rep = transport_exponent_check(3, 0.5, H=512)
        assert rep.nu == pytest.approx(0.5) and rep.profile == "increasing"
        assert abs(rep.fitted_nu - 0.5) <= 0.05 and rep.margin_ok

    def test_shifted_source(self):
        rep = transport_exponent_check(2, 0.3, tau_star=5, H=512)
        assert rep.margin_ok and abs(rep.fitted_nu - 0.4) <= 0.05

    def test_margin_failure_reported(self):
        # an absurd lower envelope cannot be met
        rep = transport_exponent_check(2, 0.5, H=64, c_minus=1e6)
        assert not rep.margin_ok and rep.first_failing_lag == 1

    def test_domain(self):
        with pytest.raises(DomainError):
            transport_exponent_check(0, 0.5)


class TestPathSums:
    def test_single_layer(self):
        K = KernelSpec("exp", a=0.7, rate=0.3)
        rep = deep_path_sum_bound([1.0], [2.0], [K], 9, 2)
        assert rep.value == pytest.approx(2.0 * 0.7 * math.exp(-0.3 * 7), rel=1e-14)

    def test_two_harmonic_layers_brute_force(self):
        ks = [KernelSpec("harmonic")] * 2
        rep = deep_path_sum_bound([1, 1], [1, 1], ks, 7, 0)
        assert rep.value == pytest.approx(brute_force_path_sum([1, 1], [1, 1], ks, 7, 0), rel=1e-14)
        # hand count: two single-jump paths plus the two-jump paths through i in 1..6
        hand = 2 / 8 + sum(1 / 8 * 1 / (i + 1) for i in range(1, 7))
        assert rep.value == pytest.approx(hand, rel=1e-14)

    @pytest.mark.parametrize("layers", [
        [KernelSpec("heavy", beta=0.4), KernelSpec("exp", rate=0.5), KernelSpec("harmonic", a=2)],
        [KernelSpec("heavy", beta=0.7)] * 4,
    ])
    def test_mixed_brute_force(self, layers, rng):
        n = len(layers)
        d, lam = rng.uniform(0.5, 1.5, n), rng.uniform(0.1, 1, n)
        rep = deep_path_sum_bound(d, lam, layers, 9, 1)
        assert rep.value == pytest.approx(brute_force_path_sum(d, lam, layers, 9, 1), rel=1e-12)
        assert rep.harmonic_bound is None

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_nested_harmonic_majorant(self, k):
        ks = [KernelSpec("harmonic")] * k
        for t in (5, 20, 100):
            rep = deep_path_sum_bound([0.0] * k, [1.0] * k, ks, t, 0)
            assert rep.value <= nested_harmonic_bound(t, k) * (1 + 1e-12)
            full = deep_path_sum_bound([1.0] * k, [1.0] * k, ks, t, 0)
            assert full.value <= full.harmonic_bound * (1 + 1e-12)

    def test_domain(self):
        k = KernelSpec()
        with pytest.raises(DomainError):
            deep_path_sum_bound([1] * 7, [1] * 7, [k] * 7, 5, 0)
        with pytest.raises(DomainError):
            deep_path_sum_bound([1], [1], [k], 3, 3)
        with pytest.raises(InputError):
            deep_path_sum_bound([1, 1], [1], [k], 3, 0)


class TestPositionalCode:
    @pytest.mark.parametrize("gamma", [0.25, 0.5, 0.75])
    def test_reference_code(self, gamma):
        rep = positional_code_check(512, gamma)
        assert rep.ok
        assert rep.impulse_partial_sum_err <= 1e-10 and rep.code_partial_sum_err <= 1e-10

    def test_non_monotone_code_flagged(self):
        c = np.ones(16)
        assert not positional_code_check(16, 0.5, code=c).ok
