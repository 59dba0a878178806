"""Weighted particle ensembles, lifted atoms and grid densities on a box domain.

Ensemble weights follow the particle-system convention ``sum(w) == N``; the
measure carried by an ensemble is ``(1/N) * sum_i w_i * delta_{x_i}``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

NORMALIZATION_RTOL = 1e-10


class DegenerateEnsembleError(ValueError):
    pass


class NonFiniteIntegrandError(ValueError):
    def __init__(self, point):
        self.point = np.asarray(point)
        super().__init__(f"integrand is not finite at point {self.point.tolist()}")


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Domain:
    """The box ``[-half_width, half_width]^dimension``."""

    dimension: int = 1
    half_width: float = 1.0

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.dimension}")
        if not self.half_width > 0:
            raise ValueError(f"half_width must be positive, got {self.half_width}")

    def contains(self, points, atol: float = 0.0) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.dimension)
        return np.all(np.abs(pts) <= self.half_width + atol, axis=1)

    @property
    def volume(self) -> float:
        return (2.0 * self.half_width) ** self.dimension

    @property
    def diameter(self) -> float:
        return 2.0 * self.half_width * np.sqrt(self.dimension)

    def cell_centers(self, n_per_axis: int) -> tuple[np.ndarray, float]:
        """Centers of a uniform tensor grid of cells and the cell volume."""
        h = 2.0 * self.half_width / n_per_axis
        axis = -self.half_width + h * (np.arange(n_per_axis) + 0.5)
        mesh = np.meshgrid(*([axis] * self.dimension), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        return pts, h**self.dimension

    def sample_uniform(self, rng: np.random.Generator, n: int, lo=None, hi=None) -> np.ndarray:
        lo = -self.half_width if lo is None else lo
        hi = self.half_width if hi is None else hi
        return rng.uniform(lo, hi, size=(n, self.dimension))


@dataclass(frozen=True, eq=False)
class WeightedEnsemble:
    """N atoms with nonnegative weights; represents ``(1/N) sum w_i delta_{x_i}``."""

    positions: np.ndarray
    weights: np.ndarray
    domain: Domain | None = None
    normalized: bool = False

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if pos.ndim != 2 or pos.shape[0] < 1:
            raise ValueError("ensemble needs at least one atom")
        if pos.shape[0] != w.shape[0]:
            raise ValueError(f"{pos.shape[0]} positions but {w.shape[0]} weights")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if self.domain is not None:
            if pos.shape[1] != self.domain.dimension:
                raise ValueError("position dimension does not match domain")
            if not np.all(self.domain.contains(pos)):
                raise ValueError("positions outside the domain")
        if self.normalized:
            n = w.shape[0]
            if abs(w.sum() - n) > NORMALIZATION_RTOL * n:
                raise ValueError(f"weights sum to {w.sum()!r}, expected {n}")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def dimension(self) -> int:
        return self.positions.shape[1]

    @property
    def masses(self) -> np.ndarray:
        return self.weights / self.n

    def with_weights(self, weights, normalized: bool | None = None) -> "WeightedEnsemble":
        return WeightedEnsemble(
            self.positions,
            weights,
            self.domain,
            self.normalized if normalized is None else normalized,
        )

    def __eq__(self, other):
        if not isinstance(other, WeightedEnsemble):
            return NotImplemented
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.weights, other.weights)
            and self.domain == other.domain
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LiftedEnsemble:
    """Atoms ``(x_i, w_i)`` on ``X x R_+``, each with probability 1/N."""

    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if pos.shape[0] < 1 or pos.shape[0] != w.shape[0]:
            raise ValueError("lifted ensemble needs matching, nonempty positions and weights")
        if np.any(w < 0):
            raise ValueError("lifted weights must be nonnegative")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def points(self) -> np.ndarray:
        """Atoms as points of ``R^{d+1}`` (position coordinates, then weight)."""
        return np.column_stack([self.positions, self.weights])

    def pair(self, phi: Callable[[np.ndarray], np.ndarray]) -> float:
        """The lifted pairing ``int w phi(x) dnu(x, w)``."""
        return float(np.mean(self.weights * np.asarray(phi(self.positions), dtype=float)))


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Cell-centered values of a density on a uniform grid over the domain."""

    domain: Domain
    n_per_axis: int
    values: np.ndarray
    probability: bool = True

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).ravel()
        if vals.shape[0] != self.n_per_axis**self.domain.dimension:
            raise ValueError("values do not match the grid size")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("density values must be finite and nonnegative")
        object.__setattr__(self, "values", _frozen(vals))
        if self.probability and abs(self.total_mass() - 1.0) > 1e-8:
            raise ValueError(f"density integrates to {self.total_mass()!r}, expected 1")

    @classmethod
    def from_function(cls, domain: Domain, n_per_axis: int, f, normalize: bool = True):
        pts, vol = domain.cell_centers(n_per_axis)
        vals = np.asarray(f(pts), dtype=float)
        if normalize:
            vals = vals / (vals.sum() * vol)
        return cls(domain, n_per_axis, vals, probability=normalize)

    @property
    def cell_volume(self) -> float:
        return (2.0 * self.domain.half_width / self.n_per_axis) ** self.domain.dimension

    @property
    def points(self) -> np.ndarray:
        return self.domain.cell_centers(self.n_per_axis)[0]

    @property
    def masses(self) -> np.ndarray:
        return self.values * self.cell_volume

    def total_mass(self) -> float:
        return float(self.values.sum() * self.cell_volume)


Measure = Union[WeightedEnsemble, GridDensity]


def atoms_of(measure: Measure) -> tuple[np.ndarray, np.ndarray]:
    """Support points and point masses of either measure representation."""
    if isinstance(measure, WeightedEnsemble):
        return measure.positions, measure.masses
    if isinstance(measure, GridDensity):
        return measure.points, measure.masses
    raise TypeError(f"not a measure: {type(measure).__name__}")


def lift(ensemble: WeightedEnsemble) -> LiftedEnsemble:
    return LiftedEnsemble(ensemble.positions, ensemble.weights)


def project(lifted: LiftedEnsemble, domain: Domain | None = None) -> WeightedEnsemble:
    """Projection ``h nu``: the measure ``(1/N) sum w_i delta_{x_i}`` on X."""
    return WeightedEnsemble(lifted.positions, lifted.weights, domain)


def normalize_weights(ensemble: WeightedEnsemble) -> WeightedEnsemble:
    total = ensemble.weights.sum()
    if not total > 0:
        raise DegenerateEnsembleError("degenerate ensemble: all weights are zero")
    w = ensemble.weights * (ensemble.n / total)
    return ensemble.with_weights(w, normalized=True)


def integrate(measure: Measure, f: Callable[[np.ndarray], np.ndarray]) -> float:
    """Pair a measure with a vectorized test function ``f(points) -> values``."""
    pts, masses = atoms_of(measure)
    vals = np.asarray(f(pts), dtype=float).reshape(-1)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        raise NonFiniteIntegrandError(pts[np.argmax(bad)])
    return float(np.dot(masses, vals))


def second_moment(measure: Measure) -> float:
    return integrate(measure, lambda x: np.sum(x * x, axis=1))


def quadrature_from_density(density: GridDensity, n_atoms: int) -> WeightedEnsemble:
    """Discretize a grid density onto ``n_atoms`` cell-centered atoms.

    ``n_atoms`` must be a perfect d-th power. The density is linearly
    interpolated onto the new cell centers; the atom weights are proportional
    to the resulting cell masses and sum to ``n_atoms``.
    """
    dom = density.domain
    d = dom.dimension
    per_axis = int(round(n_atoms ** (1.0 / d)))
    if per_axis**d != n_atoms:
        raise ValueError(f"n_atoms={n_atoms} is not a perfect power for d={d}")
    if n_atoms < 2:
        raise ValueError("need at least two atoms")
    pts, _ = dom.cell_centers(per_axis)
    if per_axis == density.n_per_axis:
        vals = np.array(density.values)
    else:
        from scipy.interpolate import RegularGridInterpolator

        h = 2.0 * dom.half_width / density.n_per_axis
        axis = -dom.half_width + h * (np.arange(density.n_per_axis) + 0.5)
        grid_vals = density.values.reshape((density.n_per_axis,) * d)
        interp = RegularGridInterpolator(
            (axis,) * d, grid_vals, method="linear", bounds_error=False, fill_value=None
        )
        vals = np.clip(interp(pts), 0.0, None)
    if not vals.sum() > 0:
        raise DegenerateEnsembleError("degenerate ensemble: density vanishes on the atom grid")
    w = vals * (n_atoms / vals.sum())
    return WeightedEnsemble(pts, w, dom, normalized=True)


def ensemble_to_csv(ensemble: WeightedEnsemble) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    d = ensemble.dimension
    writer.writerow(["atom_index"] + [f"x_{k}" for k in range(d)] + ["weight"])
    for i in range(ensemble.n):
        writer.writerow([i] + [repr(float(v)) for v in ensemble.positions[i]] + [repr(float(ensemble.weights[i]))])
    return buf.getvalue()


def ensemble_from_csv(text: str, domain: Domain | None = None) -> WeightedEnsemble:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], [r for r in rows[1:] if r]
    if header[0] != "atom_index" or header[-1] != "weight":
        raise ValueError(f"unexpected ensemble header {header}")
    body.sort(key=lambda r: int(r[0]))
    pos = np.array([[float(v) for v in r[1:-1]] for r in body])
    w = np.array([float(r[-1]) for r in body])
    return WeightedEnsemble(pos, w, domain)
