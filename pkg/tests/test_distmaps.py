import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dprisk.core import BaseDraw, CapabilityError, DomainError, SeedSpec
from dprisk.distmaps import (
    CosineMap,
    GaussianLinearMap,
    MixtureMap,
    NonlinearMap,
    PricingMap,
    StrategicMap,
)
from dprisk.models import MLP2, LogisticLinear

from conftest import assert_vec

N = 10_000


def analytic_maps():
    return [
        (MixtureMap(), 0.3),
        (MixtureMap(0.3, 1.0, 0.5, 2.0, 0.1, 1.0, 0.25), -0.4),
        (CosineMap(1.0), 1.1),
        (NonlinearMap(0.5, 1.0, 1.0), 0.5),
        (PricingMap([6.0, 5.0], 1.5, 1.0), [1.0, 2.0]),
        (GaussianLinearMap(2.0, 1.0, 0.5), 0.2),
    ]


def pool(n=50, f=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, f)), rng.integers(0, 2, n)


def test_degenerate_mixture_samples_sit_at_zero():
    m = MixtureMap(0.5, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0)
    batch = m.sample(0.0, 25, SeedSpec(1))
    assert np.all(batch.features == 0.0)
    assert batch.inducing_params.tolist() == [0.0]


def test_degenerate_pricing_samples_at_mean():
    batch = PricingMap([6.0], 1.5, 0.0).sample(2.0, 3, SeedSpec(1))
    assert batch.features.ravel().tolist() == [3.0, 3.0, 3.0]


def test_strategic_zero_strength_returns_base_rows():
    x, y = pool()
    m = StrategicMap(x, y, LogisticLinear(3), eps=0.0)
    batch = m.sample(np.ones(4), 50, SeedSpec(0))
    assert np.array_equal(batch.features, x)
    assert np.array_equal(batch.labels, y)


def test_strategic_pool_size_rules():
    x, y = pool()
    m = StrategicMap(x, y, LogisticLinear(3))
    with pytest.raises(Exception, match="without replacement"):
        m.sample(np.zeros(4), 51, SeedSpec(0))
    r = StrategicMap(x, y, LogisticLinear(3), replace=True)
    assert len(r.sample(np.zeros(4), 200, SeedSpec(0))) == 200
    sub = m.sample(np.zeros(4), 10, SeedSpec(0)).base.values
    assert len({tuple(row) for row in sub}) == 10


def test_pushforward_examples():
    assert PricingMap([6.0], 1.5).pushforward(BaseDraw(np.array([[6.0]])), 4.0).item() == 0.0
    nl = NonlinearMap(0.5, 1.0, 1.0)
    assert nl.pushforward(BaseDraw(np.zeros((1, 1))), 0.5).item() == 1.0
    x, y = pool()
    model = MLP2(3, 4)
    theta = model.flatten(np.ones((4, 3)), np.zeros(4), np.zeros(4), 0.0)  # W2 = 0 -> zero score gradient
    m = StrategicMap(x, y, model, eps=10.0)
    assert np.array_equal(m.pushforward(BaseDraw(x, labels=y), theta), x)


def test_nonlinear_domain_guard_names_constraint():
    nl = NonlinearMap(0.5, 1.0, 1.0)
    with pytest.raises(DomainError, match="a1\\*theta \\+ a0"):
        nl.sample(-0.6, 5, SeedSpec(0))
    assert nl.declared_box == (-0.5, 1.0)


def test_jacobians():
    base = BaseDraw(np.zeros((2, 2)))
    assert_vec(PricingMap([6.0, 6.0], 1.5).pushforward_jacobian(base, [1.0, 1.0])[0], -1.5 * np.eye(2))
    mix = MixtureMap(0.5, 0.7, 0.0, 2.0, 0.0)
    b = BaseDraw(np.zeros((2, 1)), components=np.array([0, 1]))
    assert mix.pushforward_jacobian(b, 0.1).ravel().tolist() == [0.7, 2.0]
    x, y = pool(f=2)
    jac = StrategicMap(x, y, LogisticLinear(2), eps=10.0, favorable_label=1).pushforward_jacobian(
        BaseDraw(x), np.zeros(3)
    )
    assert_vec(jac[0], np.hstack([10.0 * np.eye(2), np.zeros((2, 1))]))


def test_mlp_strategic_is_finite_difference_only_by_default():
    x, y = pool()
    model = MLP2(3, 4)
    m = StrategicMap(x, y, model)
    assert not m.capabilities.has_analytic_jacobian
    with pytest.raises(CapabilityError, match="finite-difference"):
        m.pushforward_jacobian(BaseDraw(x), np.zeros(model.theta_dim))


def test_mlp_pathwise_jacobian_matches_finite_differences():
    x, y = pool(n=20, f=3, seed=3)
    model = MLP2(3, 5)
    m = StrategicMap(x, y, model, eps=2.0, pathwise=True)
    theta = np.random.default_rng(4).standard_normal(model.theta_dim)
    base = BaseDraw(x, labels=y)
    jac = m.pushforward_jacobian(base, theta)
    h = 1e-6
    for k in range(model.theta_dim):
        e = np.zeros_like(theta)
        e[k] = h
        fd = (m.pushforward(base, theta + e) - m.pushforward(base, theta - e)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, k], fd, atol=1e-6)
    g = np.random.default_rng(5).standard_normal(x.shape)
    assert_vec(m.mean_vjp(base, theta, g), m.vjp(base, theta, g).mean(axis=0))


def test_log_density_grad_single_gaussian_formula():
    m = GaussianLinearMap(2.0, 1.0, 0.5)
    z = np.array([0.0, 1.4, 3.0])
    assert_vec(m.log_density_grad(z, 0.2).ravel(), 2.0 * (z - 1.4) / 0.25)
    assert m.log_density_grad([1.4], 0.2).item() == 0.0


def test_mixture_with_full_weight_reduces_to_single_gaussian():
    mix = MixtureMap(1.0, 2.0, 1.0, 5.0, -3.0, 0.5, 0.0)
    single = GaussianLinearMap(2.0, 1.0, 0.5)
    z = np.linspace(-2, 3, 7)
    assert_vec(mix.log_density_grad(z, 0.3), single.log_density_grad(z, 0.3))


def test_degenerate_density_and_missing_capabilities():
    with pytest.raises(DomainError):
        MixtureMap(0.5, 1, 1, 1, 1, 0.0, 1.0).log_density_grad([0.0], 0.0)
    with pytest.raises(DomainError):
        PricingMap([6.0], 1.5, 0.0).log_density_grad([0.0], 0.0)
    x, y = pool()
    m = StrategicMap(x, y, LogisticLinear(3))
    with pytest.raises(CapabilityError):
        m.log_density_grad(x, np.zeros(4))
    with pytest.raises(CapabilityError):
        m.analytic_mean(np.zeros(4))


def test_analytic_mean_examples():
    assert MixtureMap().analytic_mean(-1.0).item() == 0.0
    assert CosineMap().analytic_mean(0.0).item() == 1.0
    assert PricingMap([6.0], 1.5).analytic_mean(4.0).item() == 0.0
    assert NonlinearMap(0.5, 1.0).analytic_mean(0.5).item() == 1.0


@pytest.mark.parametrize("m,theta", analytic_maps())
def test_empirical_mean_matches_analytic_mean(m, theta):
    z = m.sample(theta, N, SeedSpec(11)).features
    se = z.std(axis=0, ddof=1) / math.sqrt(N)
    assert np.all(np.abs(z.mean(axis=0) - m.analytic_mean(theta)) <= 3 * se)


@pytest.mark.parametrize("m,theta", analytic_maps())
def test_score_has_zero_mean(m, theta):
    z = m.sample(theta, N, SeedSpec(12)).features
    s = m.log_density_grad(z, theta)
    se = s.std(axis=0, ddof=1) / math.sqrt(N)
    assert np.all(np.abs(s.mean(axis=0)) <= 3 * se)


@pytest.mark.parametrize("m,theta", analytic_maps())
def test_pushforward_of_fresh_base_matches_sample(m, theta):
    a = m.sample(theta, N, SeedSpec(21)).features
    b = m.pushforward(m.sample_base(N, SeedSpec(22).rng()), theta)
    se = np.sqrt(a.var(axis=0, ddof=1) / N + b.var(axis=0, ddof=1) / N)
    assert np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) <= 3 * se)
    # variance agreement: the standard error of a sample variance is about var * sqrt(2 / N)
    va, vb = a.var(axis=0), b.var(axis=0)
    assert np.all(np.abs(va - vb) <= 3 * np.sqrt(2.0 / N) * np.sqrt(va**2 + vb**2))


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1)
)
def test_pricing_pushforward_is_affine(t1, t2, s1, s2, lam):
    m = PricingMap([6.0, 4.0], 1.5, 1.0)
    base = m.sample_base(8, SeedSpec(0).rng())
    p, q = np.array([t1, t2]), np.array([s1, s2])
    mixed = m.pushforward(base, lam * p + (1 - lam) * q)
    combo = lam * m.pushforward(base, p) + (1 - lam) * m.pushforward(base, q)
    np.testing.assert_allclose(mixed, combo, rtol=0, atol=1e-12)
