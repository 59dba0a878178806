"""Weight dynamics on frozen atoms: the interacting particle scheme, the mean-field
reference solver and a Picard iteration for the mean-field fixed point."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .drift import DriftOperator, DriftStrategy, strategy_constants
from .measures import Domain, GridDensity, WeightedEnsemble, quadrature_from_density


class Scheme(str, Enum):
    EXPONENTIAL_EULER = "exponential_euler"
    LINEAR_EULER = "linear_euler"


class NegativeWeightError(ArithmeticError):
    pass


class PicardDivergenceError(ArithmeticError):
    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"Picard iteration did not converge in {iterations} iterations; last residual {residual:.3e}")


@dataclass(frozen=True)
class SimulationConfig:
    horizon: float = 2.0
    dt: float = 0.01
    scheme: Scheme = Scheme.EXPONENTIAL_EULER
    renormalize: bool = True
    seed: int = 0
    stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not self.horizon >= 0 or not self.dt > 0:
            raise ValueError("horizon must be nonnegative and dt positive")
        if self.horizon > 0 and self.dt > self.horizon * (1 + 1e-12):
            raise ValueError(f"dt={self.dt} exceeds the horizon {self.horizon}")
        if self.stride < 1:
            raise ValueError("stride must be at least 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


DIAGNOSTIC_FIELDS = ("t", "drift_mean", "min_w", "max_w", "energy")


@dataclass
class Trajectory:
    """Stored states on a time grid plus per-step diagnostics."""

    times: list[float] = field(default_factory=list)
    states: list[WeightedEnsemble] = field(default_factory=list)
    diagnostics: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in DIAGNOSTIC_FIELDS})

    @property
    def positions(self) -> np.ndarray:
        return self.states[0].positions

    @property
    def final(self) -> WeightedEnsemble:
        return self.states[-1]

    def weights_matrix(self) -> np.ndarray:
        return np.stack([s.weights for s in self.states])

    def record(self, t, w, a, energy):
        m = w / w.sum()
        d = self.diagnostics
        d["t"].append(float(t))
        d["drift_mean"].append(float(np.dot(m, a)))
        d["min_w"].append(float(w.min()))
        d["max_w"].append(float(w.max()))
        d["energy"].append(float(energy))

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["t", "atom_index", "weight"])
        for t, s in zip(self.times, self.states):
            for i, w in enumerate(s.weights):
                out.writerow([repr(float(t)), i, repr(float(w))])
        return buf.getvalue()

    def positions_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        d = self.positions.shape[1]
        out.writerow(["atom_index"] + [f"x_{k}" for k in range(d)])
        for i, x in enumerate(self.positions):
            out.writerow([i] + [repr(float(v)) for v in x])
        return buf.getvalue()

    def diagnostics_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(DIAGNOSTIC_FIELDS)
        for row in zip(*(self.diagnostics[k] for k in DIAGNOSTIC_FIELDS)):
            out.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def subsample(self, every: int) -> "Trajectory":
        return Trajectory(self.times[::every], self.states[::every], self.diagnostics)


def _dt_hint(strategy: DriftStrategy) -> str:
    try:
        C = strategy_constants(strategy).bound
        return f"dt <= 1/(2C) = {1 / (2 * C):.3e}"
    except Exception:  # constants may be unavailable, e.g. truncated kernel without floor
        return "dt <= 1/(2C) with C the drift bound constant"


def _advance(w: np.ndarray, a: np.ndarray, dt: float, scheme: Scheme, renormalize: bool, strategy=None) -> np.ndarray:
    n = w.shape[0]
    if scheme is Scheme.EXPONENTIAL_EULER:
        new = w * np.exp(-a * dt)
    else:
        new = w * (1.0 - a * dt)
        if np.any(new < 0):
            hint = _dt_hint(strategy) if strategy is not None else "a smaller dt"
            raise NegativeWeightError(f"linear Euler step produced a negative weight; use {hint}")
    if renormalize:
        new = new * (n / new.sum())
    return new


def step(ensemble: WeightedEnsemble, strategy: DriftStrategy, dt: float, scheme=Scheme.EXPONENTIAL_EULER,
         renormalize: bool = True, operator: DriftOperator | None = None) -> WeightedEnsemble:
    """One explicit step: drift at the pre-step measure, then reweight every atom."""
    op = operator or DriftOperator(strategy, ensemble.positions)
    a = op(ensemble.weights)
    w = _advance(ensemble.weights, a, dt, Scheme(scheme), renormalize, strategy)
    return WeightedEnsemble(ensemble.positions, w, ensemble.domain)


def simulate_interacting(config: SimulationConfig, strategy: DriftStrategy, initial: WeightedEnsemble,
                         record_energy: bool = True) -> Trajectory:
    op = DriftOperator(strategy, initial.positions)
    traj = Trajectory()
    w = np.array(initial.weights)
    n_steps = config.n_steps
    traj.times.append(0.0)
    traj.states.append(initial)
    for j in range(n_steps):
        a = op(w)
        traj.record(j * config.dt, w, a, op.energy(w) if record_energy else math.nan)
        w = _advance(w, a, config.dt, config.scheme, config.renormalize, strategy)
        if (j + 1) % config.stride == 0 or j + 1 == n_steps:
            traj.times.append((j + 1) * config.dt)
            traj.states.append(WeightedEnsemble(initial.positions, w, initial.domain))
    a = op(w)
    traj.record(n_steps * config.dt, w, a, op.energy(w) if record_energy else math.nan)
    return traj


def solve_mean_field(density0: GridDensity, n_atoms: int, strategy: DriftStrategy, horizon: float,
                     dt_ref: float, stride: int = 1, record_energy: bool = False) -> Trajectory:
    """Deterministic reference law: quadrature atoms, RK4 in time, renormalized every step."""
    if n_atoms < 64:
        raise ValueError("the mean-field reference needs at least 64 atoms")
    ens0 = quadrature_from_density(density0, n_atoms)
    return evolve_reference(ens0, strategy, horizon, dt_ref, stride, record_energy)


def evolve_reference(ens0: WeightedEnsemble, strategy: DriftStrategy, horizon: float, dt: float, stride: int = 1,
                     record_energy: bool = False) -> Trajectory:
    """Classical RK4 for the weights of a fixed atom set, renormalized every step."""
    op = DriftOperator(strategy, ens0.positions)
    n = ens0.n
    n_steps = int(round(horizon / dt))
    traj = Trajectory()
    traj.times.append(0.0)
    traj.states.append(ens0)
    w = np.array(ens0.weights)

    def rhs(v):
        return -v * op(v)

    for j in range(n_steps):
        a = op(w)
        k1 = -w * a
        traj.record(j * dt, w, a, op.energy(w) if record_energy else math.nan)
        k2 = rhs(w + 0.5 * dt * k1)
        k3 = rhs(w + 0.5 * dt * k2)
        k4 = rhs(w + dt * k3)
        w = w + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if np.any(w < 0):
            raise NegativeWeightError(f"reference step produced a negative weight; use {_dt_hint(strategy)}")
        w = w * (n / w.sum())
        if (j + 1) % stride == 0 or j + 1 == n_steps:
            traj.times.append((j + 1) * dt)
            traj.states.append(WeightedEnsemble(ens0.positions, w, ens0.domain))
    traj.record(n_steps * dt, w, op(w), op.energy(w) if record_energy else math.nan)
    return traj


@dataclass
class PicardResult:
    trajectory: Trajectory
    iterations: int
    residuals: list[float]


def picard_iterate(density0: GridDensity, strategy: DriftStrategy, horizon: float, dt_ref: float, tol: float,
                   max_iter: int = 50, n_atoms: int = 256, stride: int = 1) -> PicardResult:
    """Fixed point of the frozen-law map on the reference quadrature atoms.

    Given a candidate law path, every atom's weight solves the linear ODE
    ``dw/dt = -w a(nu_t, x)``; its log is integrated with Simpson's rule on a
    half-step grid. Iterates stop once successive law paths are within
    ``tol`` in sup-over-time ``W_2``. ``iterations`` counts the maps applied
    before the confirming one, so a drift that ignores the law converges in 1.
    """
    from .metrics import wasserstein

    if not tol > 0:
        raise ValueError("tol must be positive")
    ens0 = quadrature_from_density(density0, n_atoms)
    op = DriftOperator(strategy, ens0.positions)
    n = ens0.n
    n_steps = int(round(horizon / dt_ref))
    h = dt_ref
    # candidate law at the half-step grid t = k h / 2
    path = np.tile(ens0.weights, (2 * n_steps + 1, 1))
    residuals: list[float] = []

    def apply(path):
        a = np.stack([op(w) for w in path])
        logw = np.empty_like(path)
        logw[0] = np.log(ens0.weights)
        for k in range(n_steps):
            a0, am, a1 = a[2 * k], a[2 * k + 1], a[2 * k + 2]
            logw[2 * k + 1] = logw[2 * k] - h / 24 * (5 * a0 + 8 * am - a1)
            logw[2 * k + 2] = logw[2 * k] - h / 6 * (a0 + 4 * am + a1)
        w = np.exp(logw - logw.max(axis=1, keepdims=True))
        return w * (n / w.sum(axis=1, keepdims=True))

    def distance(p, q):
        return max(
            wasserstein(WeightedEnsemble(ens0.positions, p[k]), WeightedEnsemble(ens0.positions, q[k]))
            for k in range(0, p.shape[0], 2)
        )

    for it in range(1, max_iter + 1):
        new = apply(path)
        res = distance(new, path)
        residuals.append(res)
        path = new
        if res <= tol:
            break
    else:
        raise PicardDivergenceError(residuals[-1], max_iter)

    traj = Trajectory()
    for k in range(n_steps + 1):
        w = path[2 * k]
        if k % stride == 0 or k == n_steps:
            traj.times.append(k * h)
            traj.states.append(WeightedEnsemble(ens0.positions, w, ens0.domain))
        a = op(w)
        traj.record(k * h, w, a, math.nan)
    return PicardResult(traj, max(1, len(residuals) - 1), residuals)


def sample_positions(domain: Domain, n: int, rng: np.random.Generator, sampler: str = "uniform",
                     reference=None) -> np.ndarray:
    """I.i.d. initial positions: uniform on the box, or drawn from the reference density."""
    if sampler == "uniform":
        return domain.sample_uniform(rng, n)
    if sampler == "reference":
        if domain.dimension != 1:
            raise ValueError("reference sampling is implemented for d = 1")
        grid, vol = domain.cell_centers(4096)
        cdf = np.concatenate([[0.0], np.cumsum(reference.density(grid) * vol)])
        cdf /= cdf[-1]
        edges = np.linspace(-domain.half_width, domain.half_width, 4097)
        return np.interp(rng.uniform(size=n), cdf, edges)[:, None]
    raise ValueError(f"unknown sampler {sampler!r}")


def initial_density(domain: Domain, sampler: str, reference, n_per_axis: int) -> GridDensity:
    """Grid density of the law used by :func:`sample_positions`."""
    if sampler == "uniform":
        return GridDensity.from_function(domain, n_per_axis, lambda x: np.ones(x.shape[0]))
    if sampler == "reference":
        return GridDensity.from_function(domain, n_per_axis, reference.density)
    raise ValueError(f"unknown sampler {sampler!r}")
