"""Wasserstein distances between weighted ensembles, grid divergences and energies."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

# keep POT from importing every installed array framework
for _name in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_name}", "1")

import ot  # noqa: E402

from .measures import GridDensity, LiftedEnsemble, Measure, WeightedEnsemble, atoms_of  # noqa: E402

MAX_EXACT_ATOMS = 4096


@dataclass(frozen=True)
class TransportPlan:
    source: np.ndarray
    target: np.ndarray
    mass: np.ndarray
    cost: float
    p: int


def _probability(measure) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(measure, LiftedEnsemble):
        pts = measure.points()
        return pts, np.full(measure.n, 1.0 / measure.n)
    pts, masses = atoms_of(measure)
    total = masses.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"measure has total mass {total!r}, expected 1")
    return pts, masses


def wasserstein_1d(mu: Measure, nu: Measure, p: int = 2) -> float:
    """Exact ``W_p`` on the line through the monotone (quantile) coupling."""
    x, a = _probability(mu)
    y, b = _probability(nu)
    if x.shape[1] != 1 or y.shape[1] != 1:
        raise ValueError("wasserstein_1d needs d = 1; use wasserstein_exact for higher dimensions")
    ix, iy = np.argsort(x[:, 0], kind="stable"), np.argsort(y[:, 0], kind="stable")
    xs, ys = x[ix, 0], y[iy, 0]
    ca, cb = np.cumsum(a[ix]), np.cumsum(b[iy])
    ca[-1] = cb[-1] = 1.0
    levels = np.unique(np.concatenate([[0.0], ca, cb]))
    levels = levels[levels <= 1.0]
    mids = (levels[:-1] + levels[1:]) / 2
    dl = np.diff(levels)
    qx = xs[np.minimum(np.searchsorted(ca, mids), len(xs) - 1)]
    qy = ys[np.minimum(np.searchsorted(cb, mids), len(ys) - 1)]
    return float(np.sum(dl * np.abs(qx - qy) ** p) ** (1.0 / p))


def cost_matrix(x: np.ndarray, y: np.ndarray, p: int) -> np.ndarray:
    sq = np.zeros((x.shape[0], y.shape[0]))
    for k in range(x.shape[1]):
        sq += np.subtract.outer(x[:, k], y[:, k]) ** 2
    return sq if p == 2 else np.sqrt(sq) ** p


def wasserstein_exact(mu, nu, p: int = 2) -> tuple[float, TransportPlan]:
    """Exact discrete ``W_p`` by network simplex, for ensembles or lifted ensembles."""
    x, a = _probability(mu)
    y, b = _probability(nu)
    if x.shape[0] + y.shape[0] > MAX_EXACT_ATOMS:
        raise ValueError(
            f"{x.shape[0] + y.shape[0]} atoms exceed the exact-OT limit of {MAX_EXACT_ATOMS}; subsample first"
        )
    if x.shape[1] != y.shape[1]:
        raise ValueError("measures live in different dimensions")
    M = cost_matrix(x, y, p)
    G = ot.emd(a, b, M, numItermax=10_000_000)
    i, j = np.nonzero(G > 0)
    mass = G[i, j]
    cost = float(np.sum(mass * M[i, j]))
    return max(cost, 0.0) ** (1.0 / p), TransportPlan(i, j, mass, cost, p)


def wasserstein(mu, nu, p: int = 2) -> float:
    if not isinstance(mu, LiftedEnsemble) and atoms_of(mu)[0].shape[1] == 1:
        return wasserstein_1d(mu, nu, p)
    return wasserstein_exact(mu, nu, p)[0]


def lifted_identity_distance(a: WeightedEnsemble, b: WeightedEnsemble) -> float:
    """RMS weight gap of two ensembles on the same atoms: the lifted ``W_2`` of the identity coupling.

    For ensembles that share positions and whose weights are close this is
    the natural distance between the weight processes; it is an upper bound
    for the lifted ``W_2``.
    """
    if not np.array_equal(a.positions, b.positions):
        raise ValueError("ensembles must share atom positions")
    return float(np.sqrt(np.mean((a.weights - b.weights) ** 2)))


def _check_grid(traj_a, traj_b):
    ta, tb = np.asarray(traj_a.times), np.asarray(traj_b.times)
    if ta.shape != tb.shape or not np.allclose(ta, tb, rtol=0, atol=1e-12):
        raise ValueError("trajectories do not share a time grid")


def marginal_distances(traj_a, traj_b, p: int = 2) -> np.ndarray:
    _check_grid(traj_a, traj_b)
    return np.array([wasserstein(_unit(s), _unit(r), p) for s, r in zip(traj_a.states, traj_b.states)])


def path_sup_wasserstein(traj_a, traj_b, p: int = 2) -> float:
    """Sup over stored times of the marginal ``W_p``; a lower bound for the path-space distance."""
    return float(marginal_distances(traj_a, traj_b, p).max())


def path_lifted_distance(traj_a, traj_b) -> float:
    """``W_2`` between the laws of the lifted paths under the sup-in-time norm, for atom-indexed couplings.

    Both trajectories must have the same atoms in the same order. The atom
    pairing is the candidate coupling on path space, so the result bounds
    ``W_{2,T}`` of the lifted path laws from above; the optimum over atom
    permutations is computed exactly with the sup-norm cost.
    """
    _check_grid(traj_a, traj_b)
    pa = np.stack([s.weights for s in traj_a.states])
    pb = np.stack([s.weights for s in traj_b.states])
    xa, xb = traj_a.states[0].positions, traj_b.states[0].positions
    dx = cost_matrix(xa, xb, 2)
    dw = np.zeros_like(dx)
    for t in range(pa.shape[0]):
        dw = np.maximum(dw, np.subtract.outer(pa[t], pb[t]) ** 2)
    n, m = dx.shape
    G = ot.emd(np.full(n, 1.0 / n), np.full(m, 1.0 / m), dx + dw)
    return float(math.sqrt(max(np.sum(G * (dx + dw)), 0.0)))


def _unit(ens: WeightedEnsemble) -> WeightedEnsemble:
    return WeightedEnsemble(ens.positions, ens.weights * (ens.n / ens.weights.sum()))


def _shared_grid(p: GridDensity, q: GridDensity):
    if p.domain != q.domain or p.n_per_axis != q.n_per_axis:
        raise ValueError("densities must share a grid")
    if np.any(q.values <= 0):
        raise ValueError("reference density has a zero cell")


def kl_grid(p: GridDensity, q: GridDensity) -> float:
    _shared_grid(p, q)
    pv, qv = p.values, q.values
    pos = pv > 0
    return float(np.sum(pv[pos] * np.log(pv[pos] / qv[pos])) * p.cell_volume)


def chi2_grid(p: GridDensity, q: GridDensity) -> float:
    _shared_grid(p, q)
    return float(np.sum((p.values / q.values - 1.0) ** 2 * q.values) * p.cell_volume)


def grid_entropy(density: GridDensity) -> float:
    v = density.values
    pos = v > 0
    return float(np.sum(v[pos] * np.log(v[pos])) * density.cell_volume)


def energy_eval(kind: str, measure: Measure, strategy) -> float:
    """Free energy of ``measure``.

    ``kind`` is ``"unkernelized"`` (``F + sigma KL(m | pi)`` on a grid
    density), ``"K3"``, ``"K4"`` or ``"chi2"`` (the kernelized energies).
    """
    if kind == "unkernelized":
        if not isinstance(measure, GridDensity):
            raise TypeError("the unkernelized energy needs a grid density")
        pi = GridDensity.from_function(measure.domain, measure.n_per_axis, strategy.reference.density, normalize=False)
        F = strategy.functional.value(measure)
        kl = kl_grid(measure, GridDensity(measure.domain, measure.n_per_axis, pi.values, probability=False))
        return F + strategy.sigma * kl
    from .drift import DriftOperator, DriftStrategy, Variant

    variant = {"K3": Variant.K3, "K4": Variant.K4, "chi2": Variant.CHI2}[kind]
    s = strategy if strategy.variant is variant else DriftStrategy(
        variant, strategy.sigma, strategy.kernel, strategy.functional, strategy.reference,
        strategy.centering, strategy.quadrature_nodes, strategy.kl_grid_points,
    )
    pts, masses = atoms_of(measure)
    return DriftOperator(s, pts).energy(masses)


def entropy_lower_bound_check(density: GridDensity, delta: float) -> tuple[float, float, bool]:
    """Compare ``int rho log rho`` with ``-(2 pi / delta)^{d/2} - delta M_2(rho)``."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    d = density.domain.dimension
    lhs = grid_entropy(density)
    m2 = float(np.sum(density.masses * np.sum(density.points**2, axis=1)))
    rhs = -((2 * math.pi / delta) ** (d / 2)) - delta * m2
    return lhs, rhs, bool(lhs >= rhs - 1e-6)
