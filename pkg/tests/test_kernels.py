import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sessa_lab import _fallback, kernels

compiled = pytest.importorskip("sessa_lab._kernels")


def _strict_lower(rng, n, T, scale=0.3):
    return np.tril(scale * rng.standard_normal((n, T, T)), -1)


def test_backend_selected():
    assert kernels.BACKEND in ("compiled", "python")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 24), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_substitutions_agree(n, T, D, seed):
    rng = np.random.default_rng(seed)
    B = _strict_lower(rng, n, T)
    f = rng.standard_normal((n, T, D))
    for name in ("forward_substitution", "backward_substitution"):
        a = getattr(compiled, name)(B, f)
        b = getattr(_fallback, name)(B, f)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_forward_substitution_solves(rng):
    B = _strict_lower(rng, 2, 16)
    f = rng.standard_normal((2, 16, 3))
    s = kernels.forward_substitution(B, f)
    resid = s - np.einsum("ntj,njd->ntd", B, s) - f
    assert np.max(np.abs(resid)) < 1e-12
    x = kernels.backward_substitution(B, f)
    resid = x - np.einsum("njt,njd->ntd", B, x) - f
    assert np.max(np.abs(resid)) < 1e-12


def test_single_system_wrappers(rng):
    B = _strict_lower(rng, 1, 5)[0]
    f = rng.standard_normal((5, 2))
    assert kernels.forward_substitution(B, f).shape == (5, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 20), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_scans_agree(n, T, K, seed):
    rng = np.random.default_rng(seed)
    dec = rng.uniform(0, 1, (n, T, K))
    inj = rng.standard_normal((n, T, K))
    g = rng.standard_normal((n, T, K))
    h1 = compiled.linear_scan(dec, inj)
    h2 = _fallback.linear_scan(dec, inj)
    np.testing.assert_allclose(h1, h2, rtol=1e-12, atol=1e-13)
    for a, b in zip(compiled.linear_scan_adjoint(dec, h1, g), _fallback.linear_scan_adjoint(dec, h1, g)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)


def test_scan_adjoint_fd(rng):
    dec = rng.uniform(0.2, 1, (1, 10, 2))
    inj = rng.standard_normal((1, 10, 2))
    g = rng.standard_normal((1, 10, 2))
    h = kernels.linear_scan(dec, inj)
    gd, gi = kernels.linear_scan_adjoint(dec, h, g)
    V = rng.standard_normal(dec.shape)
    e = 1e-6
    fd = (np.sum(g * kernels.linear_scan(dec + e * V, inj)) - np.sum(g * kernels.linear_scan(dec - e * V, inj))) / (2 * e)
    assert abs(fd - np.sum(gd * V)) < 1e-8
    fd = (np.sum(g * kernels.linear_scan(dec, inj + e * V)) - np.sum(g * kernels.linear_scan(dec, inj - e * V))) / (2 * e)
    assert abs(fd - np.sum(gi * V)) < 1e-8


@pytest.mark.parametrize("gamma", [0.1, 0.5, 0.9])
@pytest.mark.parametrize("tau", [0, 3])
def test_uniform_impulse_agree(gamma, tau):
    a = compiled.uniform_impulse(gamma, tau, 300)
    b = _fallback.uniform_impulse(gamma, tau, 300)
    np.testing.assert_allclose(a, b, rtol=1e-13)
