import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from frflow.drift import (
    Centering,
    DriftOperator,
    DriftStrategy,
    Variant,
    drift_at_atoms,
    drift_bound_constant,
    drift_eval,
    drift_lipschitz_constant,
    drift_mean,
    strategy_constants,
)
from frflow.functionals import LinearEnergy, QuadraticInteraction, ReferenceMeasure, ZeroEnergy
from frflow.kernels import KernelConstants, KernelFloorError, KernelMode, MollifierSpec
from frflow.measures import Domain, WeightedEnsemble

from conftest import random_ensemble

DOM = Domain()
SPEC = MollifierSpec(0.25, DOM)
REF = ReferenceMeasure.named("quadratic", DOM)
SQUARE = LinearEnergy.named("square", DOM)


def make(variant, functional=SQUARE, sigma=1.0, centering=Centering.EMPIRICAL_MEAN, **kw):
    return DriftStrategy(variant, sigma, kw.pop("kernel", SPEC), functional, kw.pop("reference", REF), centering, **kw)


@pytest.mark.parametrize("variant", list(Variant))
def test_zero_sigma_reduces_to_flat_derivative(variant):
    e = random_ensemble(np.random.default_rng(1), 10)
    x = np.linspace(-1, 1, 7)[:, None]
    assert np.allclose(drift_eval(make(variant, sigma=0.0), e, x), SQUARE.flat_derivative(e, x), rtol=0, atol=1e-14)


@pytest.mark.parametrize("variant", [Variant.K3, Variant.CHI2])
@pytest.mark.parametrize("x0", [-0.9, 0.0, 0.37])
def test_single_atom_neutrality(variant, x0):
    s = make(variant, functional=ZeroEnergy())
    assert abs(drift_eval(s, WeightedEnsemble([[x0]], [1.0]), [[x0]])[0]) <= 1e-10


@pytest.mark.parametrize("variant", [Variant.K3, Variant.K4, Variant.CHI2])
@pytest.mark.parametrize("centering", list(Centering))
@given(seed=st.integers(0, 100_000), n=st.sampled_from([1, 2, 16, 128]))
def test_mass_preservation(variant, centering, seed, n):
    e = random_ensemble(np.random.default_rng(seed), n)
    s = make(variant, functional=QuadraticInteraction.named("gaussian", DOM), centering=centering)
    assert abs(drift_mean(s, e)) <= 1e-10


def test_drift_mean_zero_sigma_is_exact():
    e = random_ensemble(np.random.default_rng(3), 20)
    assert abs(drift_mean(make(Variant.K1, sigma=0.0), e)) <= 1e-15


def test_k1_lebesgue_centering_is_not_conservative():
    # only the empirical centering cancels for K1; the Lebesgue KL leaves a residual
    e = random_ensemble(np.random.default_rng(4), 16)
    assert abs(drift_mean(make(Variant.K1, centering=Centering.LEBESGUE_KL), e)) > 1e-6
    assert abs(drift_mean(make(Variant.K1), e)) <= 1e-12


def test_query_and_atom_evaluations_agree():
    e = random_ensemble(np.random.default_rng(5), 12)
    for v in Variant:
        for c in Centering:
            s = make(v, centering=c)
            assert np.allclose(drift_eval(s, e, e.positions), drift_at_atoms(s, e), rtol=1e-12, atol=1e-12)


def _directional(op, m, dm, h=1e-3):
    return (op.energy(m + h * dm) - op.energy(m - h * dm)) / (2 * h)


def _zero_sum_direction(rng, m):
    dm = rng.normal(size=m.size)
    dm -= dm.mean()
    return dm * 0.1 * m.min() / np.abs(dm).max()


def _box_mass(x, eps, L=1.0):
    """``int_{[-L, L]} K(x - z) dz`` for the free kernel of variance ``2 eps^2``."""
    from scipy.special import erf

    return 0.5 * (erf((L - x) / (2 * eps)) + erf((L + x) / (2 * eps)))


# energy gradient coefficient of the kernel box mass: K4 carries +1, chi2 carries -2
BOX_MASS_COEFF = {Variant.K3: 0.0, Variant.K4: 1.0, Variant.CHI2: -2.0}


@pytest.mark.parametrize("variant", [Variant.K3, Variant.K4, Variant.CHI2])
def test_drift_is_first_variation_of_energy_in_the_interior(variant):
    """Away from the boundary the kernel keeps its mass and the drift is the energy gradient."""
    rng = np.random.default_rng(8)
    x = rng.uniform(-0.3, 0.3, (10, 1))
    w = rng.uniform(0.1, 2, 10)
    m = w / w.sum()
    s = make(variant, functional=QuadraticInteraction.named("gaussian", DOM), kernel=MollifierSpec(0.08, DOM))
    op = DriftOperator(s, x)
    dm = _zero_sum_direction(rng, m)
    assert _directional(op, m, dm) == pytest.approx(float(np.dot(op(m), dm)), rel=1e-6, abs=1e-12)


@pytest.mark.parametrize("variant", [Variant.K3, Variant.K4, Variant.CHI2])
def test_energy_gradient_near_boundary_includes_kernel_mass(variant):
    rng = np.random.default_rng(8)
    e = random_ensemble(rng, 10)
    s = make(variant, functional=QuadraticInteraction.named("gaussian", DOM))
    op = DriftOperator(s, e.positions)
    m = e.masses
    dm = _zero_sum_direction(rng, m)
    expected = np.dot(op(m), dm) + s.sigma * BOX_MASS_COEFF[variant] * np.dot(_box_mass(e.positions[:, 0], 0.25), dm)
    assert _directional(op, m, dm) == pytest.approx(float(expected), rel=1e-6, abs=1e-12)


@pytest.mark.parametrize("variant", [Variant.K4, Variant.CHI2, Variant.K2])
def test_lebesgue_quadrature_converged(variant):
    e = random_ensemble(np.random.default_rng(6), 16)
    x = np.linspace(-1, 1, 33)[:, None]
    coarse = drift_eval(make(variant), e, x)
    fine = drift_eval(make(variant, quadrature_nodes=64, kl_grid_points=20480), e, x)
    assert np.max(np.abs(coarse - fine)) <= 1e-6


def test_k4_centerings_coincide():
    e = random_ensemble(np.random.default_rng(7), 16)
    a = drift_at_atoms(make(Variant.K4), e)
    b = drift_at_atoms(make(Variant.K4, centering=Centering.LEBESGUE_KL), e)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_toeplitz_path_matches_dense():
    x = DOM.cell_centers(2048)[0]
    w = 1.0 + 0.5 * np.sin(3 * x[:, 0])
    w *= 2048 / w.sum()
    s = make(Variant.K3)
    fast = DriftOperator(s, x)
    assert fast.gram.dense is None
    dense = DriftOperator(s, x)
    from frflow.kernels import kernel_matrix

    dense.gram.dense = kernel_matrix(x, x, SPEC)
    assert np.max(np.abs(fast(w) - dense(w))) <= 1e-10


def test_kernel_floor_error_for_truncated_kernel():
    spec = MollifierSpec(0.05, DOM, KernelMode.TRUNCATED_GAUSSIAN)
    e = WeightedEnsemble([[-1.0]], [1.0])
    with pytest.raises(KernelFloorError, match="kernel floor violated"):
        drift_eval(make(Variant.K3, kernel=spec), e, [[1.0]])
    ok = drift_eval(make(Variant.K3, kernel=MollifierSpec(0.05, DOM, KernelMode.TRUNCATED_GAUSSIAN, kappa=1e-3)),
                    e, [[1.0]])
    assert np.all(np.isfinite(ok))


def test_nan_error_names_point():
    bad = LinearEnergy(lambda x: np.where(x[:, 0] > 0.5, np.nan, 0.0), 1.0, 1.0, 1.0, centered=False)
    with pytest.raises(ArithmeticError, match=r"K3.*\[0\.75\]"):
        drift_eval(make(Variant.K3, functional=bad), WeightedEnsemble([[0.0]], [1.0]), [[0.75]])


def test_negative_sigma_rejected():
    with pytest.raises(ValueError):
        make(Variant.K1, sigma=-1.0)


# constants ---------------------------------------------------------------------

KC = KernelConstants(k_min=0.1, k_max=2.0, lip=5.0)
RC = (0.2, 0.8, 1.0)


def test_k1_bound_example():
    assert drift_bound_constant(Variant.K1, KC, RC, 1.0, 1.0) == pytest.approx(5.605170, abs=1e-6)
    assert drift_bound_constant(Variant.K2, KC, RC, 1.0, 1.0) == drift_bound_constant(Variant.K1, KC, RC, 1.0, 1.0)


def test_chi2_bound_example():
    assert drift_bound_constant(Variant.CHI2, KC, (0.2, 0.8, 1.0), 0.0, 1.0) == pytest.approx(40.0)


def test_other_bound_formulas():
    span = math.log(10)
    assert drift_bound_constant(Variant.K4, KC, RC, 1.0, 2.0) == pytest.approx(1 + 2 * span)
    assert drift_bound_constant(Variant.K3, KC, RC, 1.0, 1.0) == pytest.approx(1 + 2 * span + 21)


def test_k1_lipschitz_example():
    assert drift_lipschitz_constant(Variant.K1, KC, RC, 1.0, 1.0) == pytest.approx(161.0)
    assert drift_lipschitz_constant(Variant.K2, KC, RC, 1.0, 1.0) == drift_lipschitz_constant(Variant.K1, KC, RC, 1.0, 1.0)
    assert drift_lipschitz_constant(Variant.CHI2, KC, RC, 1.0, 1.0) == pytest.approx(1 + 6 * 5 / 0.2)


def test_k3_lipschitz_as_printed_ignores_sigma():
    a = drift_lipschitz_constant(Variant.K3, KC, RC, 1.0, 1.0)
    b = drift_lipschitz_constant(Variant.K3, KC, RC, 1.0, 7.0)
    assert a == b == pytest.approx(1 + 200 + 10 + 2 * 2 * 5 / 0.01)
    assert any("sigma" in n for n in strategy_constants(make(Variant.K3)).notes)


@pytest.mark.parametrize("variant", list(Variant))
def test_zero_sigma_constants(variant):
    assert drift_bound_constant(variant, KC, RC, 1.5, 0.0) == 1.5
    if variant in (Variant.K1, Variant.K4, Variant.CHI2):
        assert drift_lipschitz_constant(variant, KC, RC, 2.5, 0.0) == 2.5


def test_strategy_constants_positive():
    for v in Variant:
        c = strategy_constants(make(v))
        assert c.bound > 0 and c.lipschitz > 0
