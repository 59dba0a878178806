import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from frflow.functionals import (
    LinearEnergy,
    NonFiniteEnergyError,
    QuadraticInteraction,
    ReferenceMeasure,
    TwoLayerRegression,
    ZeroEnergy,
    build_energy,
    verify_flat_derivative,
)
from frflow.measures import Domain, GridDensity, WeightedEnsemble
from frflow.metrics import wasserstein

from conftest import random_ensemble

DOM = Domain()


def test_zero_energy():
    e = WeightedEnsemble([[0.3], [-0.2]], [1.0, 1.0])
    F = ZeroEnergy()
    assert F.evaluate(e) == 0.0
    assert np.all(F.flat_derivative(e, [[0.1], [0.5]]) == 0.0)


def test_linear_square_at_origin_atom():
    F = LinearEnergy.named("square", DOM)
    assert F.evaluate(WeightedEnsemble([[0.0]], [1.0])) == 0.0


def test_product_interaction_on_symmetric_pair():
    F = QuadraticInteraction.named("product", DOM)
    assert F.evaluate(WeightedEnsemble([[-1.0], [1.0]], [1.0, 1.0])) == pytest.approx(0.0, abs=1e-15)


def test_product_interaction_derivative_at_dirac():
    F = QuadraticInteraction.named("product", DOM, centered=False)
    a = 0.4
    x = np.array([[-0.5], [0.2], [0.9]])
    assert np.allclose(F.flat_derivative(WeightedEnsemble([[a]], [1.0]), x), 2 * a * x[:, 0])


def test_uncentered_linear_derivative_ignores_measure():
    F = LinearEnergy.named("cosine", DOM, centered=False)
    x = np.array([[0.1], [0.7]])
    d1 = F.flat_derivative(WeightedEnsemble([[0.0]], [1.0]), x)
    d2 = F.flat_derivative(WeightedEnsemble([[0.5], [0.9]], [1.0, 3.0]), x)
    assert np.array_equal(d1, d2)
    assert np.allclose(d1, np.cos(np.pi * x[:, 0]))


def test_non_finite_energy_raises():
    F = LinearEnergy(lambda x: np.full(x.shape[0], np.inf), 1.0, 1.0, 1.0)
    with pytest.raises(NonFiniteEnergyError):
        F.evaluate(WeightedEnsemble([[0.0]], [1.0]))


ENERGIES = [
    ("linear", {"f": "square"}),
    ("linear", {"f": "cosine"}),
    ("quadratic_interaction", {"k": "product"}),
    ("quadratic_interaction", {"k": "gaussian"}),
    ("two_layer_regression", {"n_features": 4, "seed": 3}),
]


@pytest.mark.parametrize("kind,params", ENERGIES)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
def test_centered_derivative_integrates_to_zero(kind, params, seed, n):
    F = build_energy(kind, DOM, True, **params)
    e = random_ensemble(np.random.default_rng(seed), n)
    assert abs(np.dot(e.masses, F.flat_derivative(e, e.positions))) <= 1e-12


def test_flat_derivative_identity_exactness():
    rng = np.random.default_rng(0)
    m = random_ensemble(rng, 9)
    w2 = rng.uniform(0.1, 2, 9)
    m2 = WeightedEnsemble(m.positions, w2 * 9 / w2.sum())
    assert verify_flat_derivative(LinearEnergy.named("square", DOM), m, m2, 1) <= 1e-12
    assert verify_flat_derivative(QuadraticInteraction.named("gaussian", DOM), m, m2, 2) <= 1e-12
    assert verify_flat_derivative(ZeroEnergy(), m, m2, 1) == 0.0
    assert verify_flat_derivative(TwoLayerRegression.random(DOM, 4, 1), m, m2, 12) <= 1e-10


def test_flat_derivative_needs_shared_positions():
    a = WeightedEnsemble([[0.0], [0.5]], [1.0, 1.0])
    b = WeightedEnsemble([[0.0], [0.6]], [1.0, 1.0])
    with pytest.raises(ValueError):
        verify_flat_derivative(ZeroEnergy(), a, b, 1)


@pytest.mark.parametrize("kind,params", ENERGIES)
@pytest.mark.parametrize("centered", [True, False])
def test_flat_derivative_bound_and_lipschitz_audit(kind, params, centered):
    F = build_energy(kind, DOM, centered, **params)
    C_F, L_F, method = F.constants(DOM)
    assert method
    rng = np.random.default_rng(11)
    worst_bound = worst_lip = 0.0
    for _ in range(200):
        mu = random_ensemble(rng, int(rng.integers(1, 12)))
        x = rng.uniform(-1, 1, (50, 1))
        worst_bound = max(worst_bound, np.abs(F.flat_derivative(mu, x)).max() / C_F)
        nu = random_ensemble(rng, int(rng.integers(1, 12)))
        y = np.clip(x + rng.normal(scale=0.1, size=x.shape), -1, 1)
        gap = np.abs(F.flat_derivative(mu, x) - F.flat_derivative(nu, y))
        denom = L_F * (wasserstein(mu, nu) + np.abs(x - y)[:, 0])
        worst_lip = max(worst_lip, float(np.max(gap / denom)))
    assert worst_bound <= 1.0
    assert worst_lip <= 1.0


def test_two_layer_feature_limit():
    with pytest.raises(ValueError):
        TwoLayerRegression(np.ones((9, 1)), np.ones(9))


def test_uniform_reference_constants():
    ref = ReferenceMeasure.named("zero", DOM)
    assert np.allclose(ref.density(np.linspace(-1, 1, 11)), 0.5)
    pmin, pmax, lip = ref.constants()
    assert pmin == pytest.approx(0.5) and pmax == pytest.approx(0.5) and lip == pytest.approx(0.0, abs=1e-12)


def test_square_potential_density_ratio():
    ref = ReferenceMeasure(lambda x: np.sum(x * x, axis=1), DOM)
    pmin, pmax, _ = ref.constants()
    assert pmax / pmin == pytest.approx(math.e, abs=1e-3)


@pytest.mark.parametrize("name", ["quadratic", "double_well"])
def test_reference_symmetric_and_normalized(name):
    ref = ReferenceMeasure.named(name, DOM, scale=2.0)
    x = np.linspace(0, 1, 17)
    assert np.allclose(ref.density(x), ref.density(-x), rtol=1e-14)
    g = GridDensity.from_function(DOM, 8192, ref.density, normalize=False)
    assert g.total_mass() == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("name", ["quadratic", "double_well"])
def test_reference_constants_hold_on_samples(name):
    ref = ReferenceMeasure.named(name, DOM, scale=3.0)
    pmin, pmax, lip = ref.constants()
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, 10_000)
    y = rng.uniform(-1, 1, 10_000)
    p, q = ref.density(x), ref.density(y)
    assert p.min() >= pmin and p.max() <= pmax
    assert np.all(np.abs(p - q) <= lip * np.abs(x - y) + 1e-15)


def test_build_energy_rejects_unknown():
    with pytest.raises(ValueError):
        build_energy("cubic", DOM)
