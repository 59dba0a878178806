"""Kernelized Fisher-Rao drifts ``a(mu, x)`` and their bound/Lipschitz constants.

Variants:

* ``K1``  smoothing only the evolving measure,
  ``dF/dmu + sigma (log(K*mu / pi) - KL(K*mu | pi))``
* ``K2``  smoothing the evolving and the target measure,
  ``dF/dmu + sigma (log(K*mu / K*pi) - KL(K*mu | K*pi))``
* ``K3``  gradient flow of ``F(m) + sigma int log(K*m / pi) dm``
* ``K4``  gradient flow of ``F(m) + sigma KL(K*m | pi)``
* ``chi2`` gradient flow of ``F(m) + sigma chi2(K*m | pi)``

Integrals against Lebesgue measure on the box (the KL terms, ``K*pi``, and
the outer convolutions of K4 and chi2) share one tensor composite
Gauss-Legendre rule per strategy. Sharing the rule makes the K4 identity
``int K*g dmu = int g d(K*mu)`` hold exactly in floating point, which is what
keeps the particle mass constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
from scipy.linalg import matmul_toeplitz

from .functionals import EnergyFunctional, ReferenceMeasure
from .kernels import KernelConstants, KernelFloorError, MollifierSpec, kernel_constants, kernel_matrix
from .measures import Measure, WeightedEnsemble, atoms_of


class Variant(str, Enum):
    K1 = "K1"
    K2 = "K2"
    K3 = "K3"
    K4 = "K4"
    CHI2 = "chi2"


class Centering(str, Enum):
    EMPIRICAL_MEAN = "empirical_mean"
    LEBESGUE_KL = "lebesgue_kl"


class DriftNumericalError(ArithmeticError):
    pass


def lebesgue_rule(domain, n_points: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor composite Gauss-Legendre rule on the box with about ``n_points`` nodes per axis."""
    order = max(1, min(order, n_points))
    panels = max(1, int(round(n_points / order)))
    g, gw = np.polynomial.legendre.leggauss(order)
    L = domain.half_width
    edges = np.linspace(-L, L, panels + 1)
    half = np.diff(edges)[:, None] / 2
    axis = ((edges[:-1, None] + edges[1:, None]) / 2 + half * g[None, :]).ravel()
    axis_w = (half * gw[None, :]).ravel()
    d = domain.dimension
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    wmesh = np.meshgrid(*([axis_w] * d), indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    weights = np.prod(np.stack([w.ravel() for w in wmesh], axis=1), axis=1)
    return nodes, weights


@dataclass(eq=False)
class DriftStrategy:
    variant: Variant
    sigma: float
    kernel: MollifierSpec
    functional: EnergyFunctional
    reference: ReferenceMeasure
    centering: Centering = Centering.EMPIRICAL_MEAN
    quadrature_nodes: int = 64
    kl_grid_points: int = 2048

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.centering = Centering(self.centering)
        # sigma == 0 is the regularizer-free limit; configs require sigma > 0
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")

    @property
    def domain(self):
        return self.kernel.domain

    @cached_property
    def rule(self) -> tuple[np.ndarray, np.ndarray]:
        return lebesgue_rule(self.domain, self.kl_grid_points, self.quadrature_nodes)

    @cached_property
    def pi_nodes(self) -> np.ndarray:
        return self.reference.density(self.rule[0])

    @cached_property
    def kpi_nodes(self) -> np.ndarray:
        nodes, omega = self.rule
        wpi = omega * self.pi_nodes
        # row blocks keep memory linear in the node count
        return np.concatenate([
            kernel_matrix(nodes[i:i + 1024], nodes, self.kernel) @ wpi for i in range(0, nodes.shape[0], 1024)
        ])

    @property
    def needs_rule(self) -> bool:
        return self.variant in (Variant.K2, Variant.K4, Variant.CHI2) or (
            self.variant is Variant.K1 and self.centering is Centering.LEBESGUE_KL
        )

    def label(self) -> str:
        return f"{self.variant.value}(sigma={self.sigma}, eps={self.kernel.epsilon}, {self.centering.value})"


def _is_uniform_grid(x: np.ndarray) -> bool:
    if x.shape[1] != 1 or x.shape[0] < 3:
        return False
    dx = np.diff(x[:, 0])
    return bool(dx[0] > 0 and np.allclose(dx, dx[0], rtol=1e-12, atol=0))


class _Gram:
    """Kernel matrix among frozen atoms; Toeplitz FFT products on large uniform 1-D grids."""

    def __init__(self, x: np.ndarray, spec: MollifierSpec, toeplitz_threshold: int = 2048):
        self.n = x.shape[0]
        if self.n >= toeplitz_threshold and _is_uniform_grid(x):
            self.column = kernel_matrix(x, x[:1], spec)[:, 0]
            self.dense = None
        else:
            self.dense = kernel_matrix(x, x, spec)

    def __matmul__(self, v):
        if self.dense is not None:
            return self.dense @ v
        return matmul_toeplitz((self.column, self.column), v, check_finite=False)


class DriftOperator:
    """Drift evaluation for a fixed set of atom positions and optional extra query points.

    Kernel matrices depend only on positions, which never move, so they are
    built once and reused for every weight vector.
    """

    def __init__(self, strategy: DriftStrategy, positions, query=None):
        self.strategy = strategy
        s = strategy
        self.positions = np.asarray(positions, dtype=float).reshape(-1, s.domain.dimension)
        self.n = self.positions.shape[0]
        self.query = None if query is None else np.asarray(query, dtype=float).reshape(-1, s.domain.dimension)
        self.gram = _Gram(self.positions, s.kernel)
        self.log_pi_atoms = s.reference.log_density(self.positions)
        if self.query is not None:
            self.gram_q = kernel_matrix(self.query, self.positions, s.kernel)
            self.log_pi_q = s.reference.log_density(self.query)
        if s.needs_rule:
            nodes, omega = s.rule
            self.omega = omega
            self.cross = kernel_matrix(self.positions, nodes, s.kernel)
            self.log_pi_nodes = np.log(s.pi_nodes)
            if self.query is not None:
                self.cross_q = kernel_matrix(self.query, nodes, s.kernel)
            if s.variant is Variant.K2:
                wpi = omega * s.pi_nodes
                self.log_kpi_atoms = self._log(self.cross @ wpi, "K*pi")
                self.log_kpi_nodes = self._log(s.kpi_nodes, "K*pi")
                if self.query is not None:
                    self.log_kpi_q = self._log(self.cross_q @ wpi, "K*pi")

    def _log(self, v, what="K*mu"):
        if np.any(~(v > 0)):
            bad = int(np.argmax(~(v > 0)))
            raise KernelFloorError(f"kernel floor violated: {what} = {v[bad]!r} at index {bad}")
        return np.log(v)

    def _check(self, a, points):
        if not np.all(np.isfinite(a)):
            bad = int(np.argmax(~np.isfinite(a)))
            raise DriftNumericalError(
                f"non-finite drift for {self.strategy.label()} at point {points[bad].tolist()}"
            )
        return a

    def evaluate(self, weights) -> tuple[np.ndarray, np.ndarray | None]:
        """Drift at the atoms and at the query points for ensemble weights ``weights``."""
        s = self.strategy
        w = np.asarray(weights, dtype=float)
        masses = w / w.sum()
        ens = WeightedEnsemble(self.positions, masses * self.n)
        dF_atoms = s.functional.flat_derivative(ens, self.positions)
        dF_q = None if self.query is None else s.functional.flat_derivative(ens, self.query)
        if s.sigma == 0:
            return self._check(dF_atoms, self.positions), dF_q

        kmu = self.gram @ masses
        log_kmu = self._log(kmu)
        if self.query is not None:
            kmu_q = self.gram_q @ masses
            log_kmu_q = self._log(kmu_q)
        reg_q = None
        v = s.variant
        if v in (Variant.K1, Variant.K2, Variant.K3):
            if v is Variant.K2:
                g = log_kmu - self.log_kpi_atoms
                g_q = None if self.query is None else log_kmu_q - self.log_kpi_q
            else:
                g = log_kmu - self.log_pi_atoms
                g_q = None if self.query is None else log_kmu_q - self.log_pi_q
            if v is Variant.K3 or s.centering is Centering.EMPIRICAL_MEAN:
                center = float(np.dot(masses, g))
            else:
                kmu_nodes = self.cross.T @ masses
                log_nodes = self._log(kmu_nodes)
                ref = self.log_kpi_nodes if v is Variant.K2 else self.log_pi_nodes
                center = float(np.sum(self.omega * kmu_nodes * (log_nodes - ref)))
            reg = g - center
            if self.query is not None:
                reg_q = g_q - center
            if v is Variant.K3:
                ratio = masses / kmu
                reg = reg + (self.gram @ ratio) - 1.0
                if self.query is not None:
                    reg_q = reg_q + self.gram_q @ ratio - 1.0
        else:
            kmu_nodes = self.cross.T @ masses
            if v is Variant.K4:
                h = self._log(kmu_nodes) - self.log_pi_nodes
                scale = 1.0
            else:
                h = kmu_nodes * np.exp(-self.log_pi_nodes)
                scale = 2.0
            conv = self.cross @ (self.omega * h)
            if v is Variant.K4 and s.centering is Centering.LEBESGUE_KL:
                center = float(np.sum(self.omega * kmu_nodes * h))
            else:
                center = float(np.dot(masses, conv))
            reg = scale * (conv - center)
            if self.query is not None:
                reg_q = scale * (self.cross_q @ (self.omega * h) - center)
        a = self._check(dF_atoms + s.sigma * reg, self.positions)
        a_q = None if self.query is None else self._check(dF_q + s.sigma * reg_q, self.query)
        return a, a_q

    def __call__(self, weights) -> np.ndarray:
        return self.evaluate(weights)[0]

    def energy(self, weights) -> float:
        """Value of the energy whose flow the variant follows.

        K1 and K2 are not gradient flows; they report the K3 energy, whose
        regularizer is the same empirical log-ratio.
        """
        s = self.strategy
        w = np.asarray(weights, dtype=float)
        masses = w / w.sum()
        F = s.functional.value(WeightedEnsemble(self.positions, masses * self.n))
        if s.sigma == 0:
            return F
        kmu = self.gram @ masses
        if s.variant in (Variant.K1, Variant.K2, Variant.K3):
            reg = float(np.dot(masses, self._log(kmu) - self.log_pi_atoms))
        else:
            kmu_nodes = self.cross.T @ masses
            if s.variant is Variant.K4:
                reg = float(np.sum(self.omega * kmu_nodes * (self._log(kmu_nodes) - self.log_pi_nodes)))
            else:
                pi = np.exp(self.log_pi_nodes)
                reg = float(np.sum(self.omega * (kmu_nodes / pi - 1.0) ** 2 * pi))
        return F + s.sigma * reg


def drift_eval(strategy: DriftStrategy, measure: Measure, x) -> np.ndarray:
    """``a(mu, x)`` at one or more points ``x``."""
    pts, masses = atoms_of(measure)
    op = DriftOperator(strategy, pts, query=np.asarray(x, dtype=float).reshape(-1, strategy.domain.dimension))
    return op.evaluate(masses)[1]


def drift_at_atoms(strategy: DriftStrategy, measure: Measure) -> np.ndarray:
    pts, masses = atoms_of(measure)
    return DriftOperator(strategy, pts)(masses)


def drift_mean(strategy: DriftStrategy, measure: Measure) -> float:
    """``int a(mu, x) mu(dx)``; zero for mass-preserving drifts."""
    pts, masses = atoms_of(measure)
    a = DriftOperator(strategy, pts)(masses)
    return float(np.dot(masses / masses.sum(), a))


def _log_span(kc: KernelConstants, rc) -> float:
    pi_min, pi_max, _ = rc
    return max(math.log(pi_max / kc.k_min), math.log(kc.k_max / pi_min))


def drift_bound_constant(variant, kernel_constants: KernelConstants, reference_constants, C_F: float, sigma: float) -> float:
    """Uniform bound ``C`` with ``|a(mu, x)| <= C`` for the variant."""
    v = Variant(variant)
    kc = kernel_constants
    pi_min = reference_constants[0]
    span = _log_span(kc, reference_constants)
    if v in (Variant.K1, Variant.K2):
        return C_F + sigma * span + sigma * math.log(kc.k_max / pi_min)
    if v is Variant.K3:
        return C_F + 2 * sigma * span + sigma * (kc.k_max / kc.k_min + 1)
    if v is Variant.K4:
        return C_F + sigma * span
    return C_F + 4 * sigma * kc.k_max / pi_min


def drift_lipschitz_constant(variant, kernel_constants: KernelConstants, reference_constants, L_F: float, sigma: float) -> float:
    """Constant ``L`` with ``|a(mu,x) - a(nu,y)| <= L (W_2(mu,nu) + |x-y|)``.

    The K3 value keeps the kernel terms without a ``sigma`` factor, as the
    derivation it comes from prints it; :func:`constants_report` flags this.
    """
    v = Variant(variant)
    kc = kernel_constants
    pi_min, _, lip_pi = reference_constants
    if v in (Variant.K1, Variant.K2, Variant.K4):
        return L_F + sigma * (3 * kc.lip / kc.k_min + 2 * lip_pi / pi_min)
    if v is Variant.K3:
        return L_F + (4 * kc.lip / kc.k_min + 2 * lip_pi / pi_min) + 2 * kc.k_max * kc.lip / kc.k_min**2
    return L_F + 6 * sigma * kc.lip / pi_min


@dataclass(frozen=True)
class DriftConstants:
    bound: float
    lipschitz: float
    kernel: KernelConstants
    reference: tuple[float, float, float]
    C_F: float
    L_F: float
    notes: tuple[str, ...] = field(default=())


def strategy_constants(strategy: DriftStrategy, eval_radius: float | None = None) -> DriftConstants:
    kc = kernel_constants(strategy.kernel, eval_radius)
    rc = strategy.reference.constants()
    C_F, L_F, method = strategy.functional.constants(strategy.domain)
    notes = [f"C_F/L_F {method}"]
    if strategy.variant is Variant.K3:
        notes.append("K3 Lipschitz constant as printed: kernel terms carry no sigma factor")
    return DriftConstants(
        bound=drift_bound_constant(strategy.variant, kc, rc, C_F, strategy.sigma),
        lipschitz=drift_lipschitz_constant(strategy.variant, kc, rc, L_F, strategy.sigma),
        kernel=kc,
        reference=rc,
        C_F=C_F,
        L_F=L_F,
        notes=tuple(notes),
    )
