"""Energy functionals ``F`` with flat derivatives, and the reference measure ``pi = e^{-U}``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measures import Domain, Measure, WeightedEnsemble, atoms_of

ScalarField = Callable[[np.ndarray], np.ndarray]


class NonFiniteEnergyError(ValueError):
    pass


def _as_points(x, d: int) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, d) if arr.shape[0] == d and d > 1 else arr.reshape(-1, d)
    return arr


class EnergyFunctional:
    """Base class. Subclasses provide ``value`` and ``_raw_derivative``.

    With ``centered=True`` the flat derivative is shifted by its mean under
    the measure, so that ``int dF/dmu(mu, x) mu(dx) == 0``.
    """

    kind = "abstract"

    def __init__(self, centered: bool = True):
        self.centered = centered

    def value(self, measure: Measure) -> float:
        raise NotImplementedError

    def _raw_derivative(self, pts, masses, x) -> np.ndarray:
        raise NotImplementedError

    def flat_derivative(self, measure: Measure, x) -> np.ndarray:
        pts, masses = atoms_of(measure)
        xa = _as_points(x, pts.shape[1])
        vals = self._raw_derivative(pts, masses, xa)
        if self.centered:
            vals = vals - float(np.dot(masses, self._raw_derivative(pts, masses, pts)))
        return vals

    def evaluate(self, measure: Measure) -> float:
        v = self.value(measure)
        if not math.isfinite(v):
            raise NonFiniteEnergyError(f"{self.kind} energy is not finite")
        return v

    def constants(self, domain: Domain) -> tuple[float, float, str]:
        """``(C_F, L_F, method)``: bound and Lipschitz constant of the flat derivative."""
        raise NotImplementedError


class ZeroEnergy(EnergyFunctional):
    kind = "zero"

    def value(self, measure):
        return 0.0

    def _raw_derivative(self, pts, masses, x):
        return np.zeros(x.shape[0])

    def constants(self, domain):
        return 0.0, 0.0, "exact"


# name -> (f, sup|f|, oscillation, Lip(f)) on [-L, L]^d
def _square(x):
    return np.sum(x * x, axis=1)


def _cosine(x):
    return np.cos(np.pi * x).sum(axis=1)


LINEAR_FIELDS: dict[str, Callable[[Domain], tuple]] = {
    "square": lambda dom: (
        _square,
        dom.dimension * dom.half_width**2,
        dom.dimension * dom.half_width**2,
        2 * dom.half_width * math.sqrt(dom.dimension),
    ),
    "cosine": lambda dom: (
        _cosine,
        float(dom.dimension),
        2.0 * dom.dimension if dom.half_width >= 1 else dom.dimension * (1 - math.cos(math.pi * dom.half_width)),
        math.pi * math.sqrt(dom.dimension),
    ),
}


class LinearEnergy(EnergyFunctional):
    """``F(mu) = int f dmu``; the flat derivative is ``f`` itself."""

    kind = "linear"

    def __init__(self, f: ScalarField, sup: float, osc: float, lip: float, centered: bool = True, name: str = "custom"):
        super().__init__(centered)
        self.f = f
        self.sup = sup
        self.osc = osc
        self.lip = lip
        self.name = name

    @classmethod
    def named(cls, name: str, domain: Domain, centered: bool = True) -> "LinearEnergy":
        f, sup, osc, lip = LINEAR_FIELDS[name](domain)
        return cls(f, sup, osc, lip, centered=centered, name=name)

    def value(self, measure):
        pts, masses = atoms_of(measure)
        return float(np.dot(masses, self.f(pts)))

    def _raw_derivative(self, pts, masses, x):
        return np.asarray(self.f(x), dtype=float)

    def constants(self, domain):
        # centering replaces sup|f| by the oscillation and adds Lip(f) W_1 in the measure argument
        bound = self.osc if self.centered else self.sup
        return bound, self.lip, "analytic"


def _product_kernel(x, y):
    return x @ y.T


def _gaussian_kernel(x, y):
    sq = np.zeros((x.shape[0], y.shape[0]))
    for k in range(x.shape[1]):
        sq += np.subtract.outer(x[:, k], y[:, k]) ** 2
    return np.exp(-sq)


INTERACTION_KERNELS: dict[str, Callable[[Domain], tuple]] = {
    # name -> (k, sup|k|, osc(k), Lip of k in one argument)
    "product": lambda dom: (
        _product_kernel,
        dom.dimension * dom.half_width**2,
        2 * dom.dimension * dom.half_width**2,
        dom.half_width * math.sqrt(dom.dimension),
    ),
    "gaussian": lambda dom: (
        _gaussian_kernel,
        1.0,
        1.0 - math.exp(-dom.diameter**2),
        math.sqrt(2.0) * math.exp(-0.5),
    ),
}


class QuadraticInteraction(EnergyFunctional):
    """``F(mu) = iint k(x, y) mu(dx) mu(dy)`` for a symmetric kernel ``k``."""

    kind = "quadratic_interaction"

    def __init__(self, k, sup: float, osc: float, lip: float, centered: bool = True, name: str = "custom"):
        super().__init__(centered)
        self.k = k
        self.sup = sup
        self.osc = osc
        self.lip = lip
        self.name = name

    @classmethod
    def named(cls, name: str, domain: Domain, centered: bool = True) -> "QuadraticInteraction":
        k, sup, osc, lip = INTERACTION_KERNELS[name](domain)
        return cls(k, sup, osc, lip, centered=centered, name=name)

    def value(self, measure):
        pts, masses = atoms_of(measure)
        return float(masses @ self.k(pts, pts) @ masses)

    def _raw_derivative(self, pts, masses, x):
        return 2.0 * (self.k(x, pts) @ masses)

    def constants(self, domain):
        if self.centered:
            return 2 * self.osc, 6 * self.lip, "analytic"
        return 2 * self.sup, 2 * self.lip, "analytic"


class TwoLayerRegression(EnergyFunctional):
    """Mean-field two-layer model ``y_hat(z) = int tanh(<x, z>) mu(dx)`` with squared loss.

    ``F(mu) = (1/2M) sum_j (y_hat(z_j) - y_j)^2`` over ``M <= 8`` fixed inputs.
    """

    kind = "two_layer_regression"

    def __init__(self, features, targets, centered: bool = True):
        super().__init__(centered)
        self.features = np.atleast_2d(np.asarray(features, dtype=float))
        self.targets = np.asarray(targets, dtype=float).ravel()
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError("features and targets differ in length")
        if self.features.shape[0] > 8:
            raise ValueError("at most 8 features are supported")

    @classmethod
    def random(cls, domain: Domain, n_features: int, seed: int, centered: bool = True):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(n_features, domain.dimension))
        y = rng.uniform(-0.5, 0.5, size=n_features)
        return cls(z, y, centered=centered)

    def _residuals(self, pts, masses):
        return np.tanh(pts @ self.features.T).T @ masses - self.targets

    def value(self, measure):
        pts, masses = atoms_of(measure)
        r = self._residuals(pts, masses)
        return float(0.5 * np.mean(r**2))

    def _raw_derivative(self, pts, masses, x):
        r = self._residuals(pts, masses)
        return np.tanh(x @ self.features.T) @ r / len(r)

    def constants(self, domain):
        m = len(self.targets)
        znorm = np.linalg.norm(self.features, axis=1)
        res_bound = 1.0 + np.abs(self.targets)
        bound = float(np.sum(res_bound) / m)
        lip_x = float(np.sum(res_bound * znorm) / m)
        lip_mu = float(np.sum(znorm) / m)
        if self.centered:
            return 2 * bound, lip_x + 2 * lip_mu, "analytic"
        return bound, max(lip_x, lip_mu), "analytic"


def verify_flat_derivative(functional: EnergyFunctional, m: WeightedEnsemble, m2: WeightedEnsemble, n_lambda: int) -> float:
    """``|F(m2) - F(m) - int_0^1 int dF/dm(m + l(m2 - m), a)(m2 - m)(da) dl|``.

    The two ensembles must share atom positions so that the segment between
    them is a weight interpolation; the ``l``-integral uses ``n_lambda``-point
    Gauss-Legendre.
    """
    if m.positions.shape != m2.positions.shape or not np.array_equal(m.positions, m2.positions):
        raise ValueError("ensembles must share the same atom positions")
    nodes, wts = np.polynomial.legendre.leggauss(n_lambda)
    lam = (nodes + 1) / 2
    wts = wts / 2
    dm = m2.masses - m.masses
    rhs = 0.0
    for lam_q, w_q in zip(lam, wts):
        wl = m.weights + lam_q * (m2.weights - m.weights)
        mid = WeightedEnsemble(m.positions, wl)
        rhs += w_q * float(np.dot(functional.flat_derivative(mid, m.positions), dm))
    lhs = functional.value(m2) - functional.value(m)
    return abs(lhs - rhs)


POTENTIALS: dict[str, Callable[[np.ndarray, float], np.ndarray]] = {
    "zero": lambda x, s: np.zeros(x.shape[0]),
    "quadratic": lambda x, s: s * 0.5 * np.sum(x * x, axis=1),
    "double_well": lambda x, s: s * (np.sum(x * x, axis=1) - 0.25) ** 2,
}


@dataclass(frozen=True, eq=False)
class ReferenceMeasure:
    """``pi(x) = e^{-U(x)} / Z`` on the box, normalized by midpoint quadrature."""

    potential: Callable[[np.ndarray], np.ndarray]
    domain: Domain
    grid_points: int = 2048
    name: str = "custom"
    normalizer: float = field(init=False)

    def __post_init__(self):
        pts, vol = self.domain.cell_centers(self.grid_points)
        z = float(np.sum(np.exp(-self.potential(pts))) * vol)
        object.__setattr__(self, "normalizer", z)

    @classmethod
    def named(cls, name: str, domain: Domain, scale: float = 1.0, grid_points: int = 2048) -> "ReferenceMeasure":
        u = POTENTIALS[name]
        return cls(lambda x: u(np.asarray(x, dtype=float), scale), domain, grid_points, name=name)

    def density(self, x) -> np.ndarray:
        pts = _as_points(x, self.domain.dimension)
        return np.exp(-self.potential(pts)) / self.normalizer

    def log_density(self, x) -> np.ndarray:
        pts = _as_points(x, self.domain.dimension)
        return -self.potential(pts) - math.log(self.normalizer)

    def constants(self) -> tuple[float, float, float]:
        """``(pi_min, pi_max, L_pi)`` certified by a dense vertex scan.

        The scan values are widened by the second-difference estimate of the
        interpolation error between scan nodes.
        """
        d = self.domain.dimension
        n = 2049 if d == 1 else 257
        axis = np.linspace(-self.domain.half_width, self.domain.half_width, n)
        h = axis[1] - axis[0]
        mesh = np.meshgrid(*([axis] * d), indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
        vals = self.density(pts).reshape((n,) * d)
        pad_val = 0.0
        lip = 0.0
        pad_lip = 0.0
        for k in range(d):
            first = np.abs(np.diff(vals, axis=k)) / h
            lip = max(lip, float(first.max()))
            second = np.abs(np.diff(vals, n=2, axis=k))
            if second.size:
                pad_val = max(pad_val, float(second.max()) / 8)
                pad_lip = max(pad_lip, float(second.max()) / h)
        lip_total = math.sqrt(d) * (lip + pad_lip)
        return float(vals.min()) - pad_val, float(vals.max()) + pad_val, lip_total


def build_energy(kind: str, domain: Domain, centered: bool = True, **params) -> EnergyFunctional:
    if kind == "zero":
        return ZeroEnergy(centered)
    if kind == "linear":
        return LinearEnergy.named(params.get("f", "square"), domain, centered)
    if kind == "quadratic_interaction":
        return QuadraticInteraction.named(params.get("k", "product"), domain, centered)
    if kind == "two_layer_regression":
        return TwoLayerRegression.random(domain, int(params.get("n_features", 4)), int(params.get("seed", 0)), centered)
    raise ValueError(f"unknown energy kind {kind!r}")
