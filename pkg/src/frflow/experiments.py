"""Studies: propagation of chaos, mollifier sweep of minimizers, constants audit, warm starts.

Each study returns a :class:`StudyReport`. Rows carry a verdict string of the
form ``"<criterion>:<pass|fail|info>"`` where the criterion ID names an
acceptance check (``AC3``, ``AC4``, ``AC5``) or ``WARM`` for the warm-start
study.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .drift import DriftOperator, DriftStrategy, Variant, strategy_constants
from .dynamics import (
    evolve_reference,
    initial_density,
    sample_positions,
    simulate_interacting,
    solve_mean_field,
)
from .measures import GridDensity, WeightedEnsemble
from .metrics import kl_grid, path_sup_wasserstein, wasserstein, wasserstein_1d


@dataclass
class StudyReport:
    study: str
    params: list[str]
    rows: list[dict] = field(default_factory=list)
    verdicts: dict[str, bool] = field(default_factory=dict)
    config_hash: str = ""
    seeds: list[int] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def add(self, cell: dict, statistic: str, value: float, stderr: float = 0.0, verdict: str = "info",
            criterion: str = ""):
        if not (math.isfinite(value) and math.isfinite(stderr)):
            raise ValueError(f"non-finite statistic {statistic} in cell {cell}")
        self.rows.append({**{p: cell.get(p, "") for p in self.params}, "statistic": statistic,
                          "value": float(value), "stderr": float(stderr), "verdict": f"{criterion}:{verdict}"})

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["study", *self.params, "statistic", "value", "stderr", "verdict"])
        for r in self.rows:
            out.writerow([self.study, *[r[p] for p in self.params], r["statistic"], repr(r["value"]),
                          repr(r["stderr"]), r["verdict"]])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "study": self.study,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "verdicts": {k: "pass" if v else "fail" for k, v in self.verdicts.items()},
            "passed": self.passed,
            "notes": self.notes,
            "failures": self.failures,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def _map(fn, items, threads: int):
    items = list(items)
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _stderr(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def gibbs_oracle(strategy: DriftStrategy, positions, max_iter: int = 500, tol: float = 1e-13) -> WeightedEnsemble:
    """Minimizer of ``F(m) + sigma KL(m | pi)`` on a grid: ``m ∝ pi exp(-dF/dm(m) / sigma)``.

    Solved by damped fixed-point iteration, exact in one step for linear ``F``.
    """
    if not strategy.sigma > 0:
        raise ValueError("the Gibbs state needs a positive entropy weight sigma")
    x = np.asarray(positions, dtype=float)
    n = x.shape[0]
    log_pi = strategy.reference.log_density(x)
    w = np.ones(n)
    for _ in range(max_iter):
        dF = strategy.functional.flat_derivative(WeightedEnsemble(x, w), x)
        logits = log_pi - dF / strategy.sigma
        new = np.exp(logits - logits.max())
        new *= n / new.sum()
        if np.max(np.abs(new - w)) <= tol * n:
            return WeightedEnsemble(x, new)
        w = 0.5 * w + 0.5 * new
    return WeightedEnsemble(x, w)


def discrete_fixed_point(strategy: DriftStrategy, positions, tol: float = 1e-12, max_iter: int = 200_000,
                         eta: float = 0.5) -> WeightedEnsemble:
    """Weights at which the particle drift vanishes on every atom with mass.

    Exponentiated-gradient (mirror descent) iterations of the kernelized
    energy, stopped once the mass-weighted drift is below ``tol``.
    """
    x = np.asarray(positions, dtype=float)
    op = DriftOperator(strategy, x)
    n = x.shape[0]
    w = np.ones(n)
    for _ in range(max_iter):
        a = op(w)
        if np.max(w * np.abs(a)) <= tol:
            break
        w = w * np.exp(-eta * a)
        w *= n / w.sum()
    return WeightedEnsemble(x, w)


# propagation of chaos ---------------------------------------------------------


def run_poc_scaling(config: RunConfig, n_list=None, n_seeds: int | None = None, threads: int = 1) -> StudyReport:
    n_list = list(config["poc.n_list"] if n_list is None else n_list)
    n_seeds = config["poc.n_seeds"] if n_seeds is None else n_seeds
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("N_list must be strictly increasing")
    n_ref = config["mean_field.n_atoms"]
    if n_ref < 8 * max(n_list):
        raise ValueError(f"mean_field.n_atoms={n_ref} is below 8 x max(N_list) = {8 * max(n_list)}")
    sim = config.simulation()
    dt_ref = config["mean_field.dt"]
    ratio = sim.dt * sim.stride / dt_ref
    if sim.dt / dt_ref < 4 - 1e-9 or abs(ratio - round(ratio)) > 1e-9:
        raise ValueError("mean_field.dt must divide the stored time step and be at most dt/4")
    strategy = config.strategy()
    domain = config.domain()
    sampler = config["simulation.initial_sampler"]
    reference = strategy.reference
    per_axis = round(n_ref ** (1 / domain.dimension))
    density0 = initial_density(domain, sampler, reference, per_axis)
    ref_traj = solve_mean_field(density0, n_ref, strategy, sim.horizon, dt_ref, stride=int(round(ratio)))
    n_fine = config["mean_field.refine_atoms"]
    fine = solve_mean_field(initial_density(domain, sampler, reference, round(n_fine ** (1 / domain.dimension))),
                            n_fine, strategy, sim.horizon, dt_ref / 2, stride=2 * int(round(ratio)))
    floor = path_sup_wasserstein(ref_traj, fine)

    seeds = [config["seed"] + k for k in range(n_seeds)]

    def cell(item):
        n, seed = item
        rng = np.random.default_rng([seed, n])
        x = sample_positions(domain, n, rng, sampler, reference)
        traj = simulate_interacting(sim, strategy, WeightedEnsemble(x, np.ones(n), domain), record_energy=False)
        return path_sup_wasserstein(traj, ref_traj)

    grid = [(n, s) for n in n_list for s in seeds]
    errors = dict(zip(grid, _map(cell, grid, threads)))

    report = StudyReport("poc", ["N", "n_seeds"], config_hash=config.digest(), seeds=seeds)
    means = []
    for n in n_list:
        e = np.array([errors[(n, s)] for s in seeds])
        means.append(e.mean())
        cellp = {"N": n, "n_seeds": n_seeds}
        report.add(cellp, "sup_w2_error", e.mean(), _stderr(e), criterion="AC4")
        half = e[: n_seeds // 2]
        if half.size > 1 and _stderr(e) > 0:
            report.add(cellp, "stderr_ratio_half_vs_full", _stderr(half) / _stderr(e), criterion="AC4")
    decreasing = all(b < a for a, b in zip(means, means[1:]))
    resolved = 3 * floor <= means[-1]
    report.add({}, "reference_floor", floor, criterion="AC4")
    report.add({"N": n_list[-1]}, "error_over_floor", means[-1] / floor if floor > 0 else 1e300, criterion="AC4",
               verdict="pass" if resolved else "fail")
    report.add({}, "strictly_decreasing", float(decreasing), criterion="AC4", verdict="pass" if decreasing else "fail")
    report.verdicts["AC4"] = bool(decreasing and resolved)
    if not resolved:
        report.notes.append("reference floor is not resolved at the largest N; refine mean_field.n_atoms")
    return report


# mollifier sweep --------------------------------------------------------------


@dataclass
class MinimizerResult:
    weights: np.ndarray
    residual: float
    iterations: int
    converged: bool


def minimize_kernel_energy(strategy: DriftStrategy, positions, flow_horizon: float = 10.0, flow_dt: float = 0.05,
                           tol: float = 1e-4, max_iter: int = 20000, eta: float = 0.5) -> MinimizerResult:
    """Minimize the kernelized energy over grid weights.

    A mean-field flow from uniform weights, then exponentiated-gradient
    iterations until the mass-weighted drift ``sqrt(sum m a^2)`` drops below
    ``tol``. Atoms with vanishing mass are free to keep a positive drift.
    """
    x = np.asarray(positions, dtype=float)
    n = x.shape[0]
    op = DriftOperator(strategy, x)
    w = np.array(evolve_reference(WeightedEnsemble(x, np.ones(n)), strategy, flow_horizon, flow_dt).final.weights)
    for it in range(max_iter + 1):
        a = op(w)
        res = math.sqrt(float(np.dot(w / n, a * a)))
        if res <= tol:
            return MinimizerResult(w, res, it, True)
        w = w * np.exp(-eta * a)
        w *= n / w.sum()
    return MinimizerResult(w, res, max_iter, False)


def grid_free_energy(strategy: DriftStrategy, weights, positions, cell_volume: float, n_per_axis: int,
                     domain) -> float:
    """``F(m) + sigma KL(m | pi)`` for grid weights read as cell masses."""
    masses = np.asarray(weights) / np.sum(weights)
    dens = GridDensity(domain, n_per_axis, masses / cell_volume)
    pi = GridDensity(domain, n_per_axis, strategy.reference.density(positions), probability=False)
    return strategy.functional.value(dens) + strategy.sigma * kl_grid(dens, pi)


def run_epsilon_sweep(config: RunConfig, epsilon_list=None, threads: int = 1) -> StudyReport:
    epsilons = list(config["sweep.epsilons"] if epsilon_list is None else epsilon_list)
    if any(b >= a for a, b in zip(epsilons, epsilons[1:])):
        raise ValueError("epsilon_list must be strictly decreasing")
    domain = config.domain()
    if domain.dimension != 1:
        raise ValueError("the mollifier sweep is implemented for d = 1")
    n = config["sweep.grid_points"]
    x, vol = domain.cell_centers(n)
    base = config.strategy(variant=Variant.K3)
    oracle = gibbs_oracle(base, x)

    def cell(eps):
        s = config.strategy(variant=Variant.K3, epsilon=eps)
        res = minimize_kernel_energy(s, x, tol=config["sweep.tol"], max_iter=config["sweep.max_iter"])
        v_eps = DriftOperator(s, x).energy(res.weights)
        v = grid_free_energy(s, res.weights, x, vol, n, domain)
        return res, v, v_eps

    results = _map(cell, epsilons, threads)
    report = StudyReport("sweep-eps", ["epsilon"], config_hash=config.digest(), seeds=[config["seed"]])
    dists = []
    ordered = True
    prev = None
    for eps, (res, v, v_eps) in zip(epsilons, results):
        ens = WeightedEnsemble(x, res.weights)
        d = wasserstein_1d(ens, oracle, 1)
        dists.append(d)
        c = {"epsilon": eps}
        report.add(c, "w1_to_gibbs", d, criterion="AC5")
        report.add(c, "polish_residual", res.residual, criterion="AC5", verdict="pass" if res.converged else "fail")
        report.add(c, "polish_iterations", res.iterations, criterion="AC5")
        report.add(c, "energy_unkernelized", v, criterion="AC5")
        report.add(c, "energy_kernelized", v_eps, criterion="AC5")
        gap_ok = v >= v_eps
        ordered &= gap_ok
        report.add(c, "energy_gap", v - v_eps, criterion="AC5", verdict="pass" if gap_ok else "fail")
        if prev is not None:
            report.add(c, "w1_to_previous", wasserstein_1d(ens, prev, 1), criterion="AC5")
        if not res.converged:
            report.failures.append({"epsilon": eps, "residual": res.residual, "iterations": res.iterations})
        prev = ens
    decreasing = all(b < a for a, b in zip(dists, dists[1:]))
    if not decreasing:
        report.notes.append("distance to the Gibbs oracle is not monotone along the epsilon sequence")
    close = dists[-1] <= 0.02
    report.add({"epsilon": epsilons[-1]}, "final_w1_within_0.02", float(close), criterion="AC5",
               verdict="pass" if close else "fail")
    report.verdicts["AC5"] = bool(decreasing and close and ordered)
    report.verdicts["AC5_polish_converged"] = bool(all(r[0].converged for r in results))
    return report


# constants audit --------------------------------------------------------------


def _random_ensemble(rng, domain, max_atoms: int) -> WeightedEnsemble:
    n = int(rng.integers(1, max_atoms + 1))
    x = domain.sample_uniform(rng, n)
    w = rng.exponential(size=n) + 1e-3
    return WeightedEnsemble(x, w * n / w.sum(), domain)


def _perturb(rng, ens: WeightedEnsemble, domain, scale: float) -> WeightedEnsemble:
    L = domain.half_width
    x = np.clip(ens.positions + scale * rng.normal(size=ens.positions.shape), -L, L)
    w = ens.weights * np.exp(scale * rng.normal(size=ens.n))
    return WeightedEnsemble(x, w * ens.n / w.sum(), domain)


def _witness(mu: WeightedEnsemble, x, nu=None, y=None) -> dict:
    out = {"mu_positions": mu.positions.tolist(), "mu_weights": mu.weights.tolist(), "x": np.ravel(x).tolist()}
    if nu is not None:
        out.update({"nu_positions": nu.positions.tolist(), "nu_weights": nu.weights.tolist(),
                    "y": np.ravel(y).tolist()})
    return out


def _drift_at(strategy, mu: WeightedEnsemble, x) -> np.ndarray:
    return DriftOperator(strategy, mu.positions, query=x).evaluate(mu.weights)[1]


def audit_strategy(strategy: DriftStrategy, n_samples: int, max_atoms: int, seed: int) -> dict:
    """Sampled bound and Lipschitz ratios (observed / certified) for one strategy."""
    consts = strategy_constants(strategy)
    domain = strategy.domain
    rng = np.random.default_rng(seed)
    out = {"bound": consts.bound, "lipschitz": consts.lipschitz, "C_F": consts.C_F,
           "bound_ratio": 0.0, "lipschitz_ratio": 0.0, "flat_ratio": 0.0, "witnesses": [], "notes": list(consts.notes)}
    for _ in range(n_samples):
        mu = _random_ensemble(rng, domain, max_atoms)
        x = domain.sample_uniform(rng, 1)
        pts = np.vstack([x, mu.positions])
        a = np.abs(_drift_at(strategy, mu, pts))
        r = float(a.max() / consts.bound)
        if r > out["bound_ratio"]:
            out["bound_ratio"] = r
        if consts.C_F > 0:
            dF = np.abs(strategy.functional.flat_derivative(mu, pts))
            out["flat_ratio"] = max(out["flat_ratio"], float(dF.max() / consts.C_F))
        if r > 1:
            out["witnesses"].append({"check": "bound", "ratio": r, **_witness(mu, x)})
    for k in range(n_samples):
        mu = _random_ensemble(rng, domain, max_atoms)
        x = domain.sample_uniform(rng, 1)
        if k % 2 == 0:
            scale = 10.0 ** rng.uniform(-4, -1)
            nu = _perturb(rng, mu, domain, scale)
            y = np.clip(x + scale * rng.normal(size=x.shape), -domain.half_width, domain.half_width)
        else:
            nu = _random_ensemble(rng, domain, max_atoms)
            y = domain.sample_uniform(rng, 1)
        gap = abs(float(_drift_at(strategy, mu, x)[0] - _drift_at(strategy, nu, y)[0]))
        dist = wasserstein(mu, nu, 2) + float(np.linalg.norm(x - y))
        if dist <= 0:
            continue
        r = gap / (consts.lipschitz * dist)
        if r > out["lipschitz_ratio"]:
            out["lipschitz_ratio"] = r
        if r > 1:
            out["witnesses"].append({"check": "lipschitz", "ratio": r, **_witness(mu, x, nu, y)})
    return out


def run_constants_audit(config: RunConfig, scenarios=None, variants=None, n_samples: int | None = None,
                        threads: int = 1) -> StudyReport:
    """Check sampled drifts against the certified bound and Lipschitz constants.

    ``scenarios`` is a list of ``(label, overrides)`` pairs applied to the
    config; the default is the configured scenario alone. An override
    ``sigma`` (which may be 0) replaces the entropy weight of the strategy.
    """
    scenarios = scenarios or [("configured", {})]
    variants = [Variant(v) for v in (variants or config["audit.variants"])]
    n_samples = config["audit.n_samples"] if n_samples is None else n_samples
    report = StudyReport("audit", ["scenario", "variant"], config_hash=config.digest(), seeds=[config["seed"]])
    jobs = []
    for label, overrides in scenarios:
        overrides = dict(overrides)
        sigma = overrides.pop("sigma", None)
        cfg = config.replace(**overrides) if overrides else config
        if cfg["kernel.mode"] != "free_gaussian":
            raise ValueError("the constants audit needs the free Gaussian kernel")
        for v in variants:
            jobs.append((label, v, cfg, sigma))

    def cell(job):
        label, v, cfg, sigma = job
        return audit_strategy(cfg.strategy(variant=v, sigma=sigma), n_samples, cfg["audit.max_atoms"], cfg["seed"])

    ok = True
    for (label, v, _, _), res in zip(jobs, _map(cell, jobs, threads)):
        c = {"scenario": label, "variant": v.value}
        good = res["bound_ratio"] <= 1 and res["lipschitz_ratio"] <= 1
        ok &= good
        report.add(c, "bound_constant", res["bound"], criterion="AC3")
        report.add(c, "lipschitz_constant", res["lipschitz"], criterion="AC3")
        report.add(c, "max_bound_ratio", res["bound_ratio"], criterion="AC3",
                   verdict="pass" if res["bound_ratio"] <= 1 else "fail")
        report.add(c, "max_lipschitz_ratio", res["lipschitz_ratio"], criterion="AC3",
                   verdict="pass" if res["lipschitz_ratio"] <= 1 else "fail")
        report.add(c, "max_flat_derivative_ratio", res["flat_ratio"], criterion="AC3")
        for note in res["notes"]:
            if f"{v.value}: {note}" not in report.notes:
                report.notes.append(f"{v.value}: {note}")
        for wit in res["witnesses"][:5]:
            report.failures.append({"scenario": label, "variant": v.value, **wit})
    report.verdicts["AC3"] = bool(ok)
    return report


# warm starts ------------------------------------------------------------------


def run_warm_start_study(config: RunConfig, overlap_list=None, threads: int = 1) -> StudyReport:
    """Flows started on the left fraction ``overlap`` of the box, compared with the Gibbs oracle."""
    overlaps = list(config["warm_start.overlaps"] if overlap_list is None else overlap_list)
    domain = config.domain()
    if domain.dimension != 1:
        raise ValueError("the warm-start study is implemented for d = 1")
    strategy = config.strategy()
    n = config["warm_start.n_atoms"]
    L = domain.half_width
    grid, _ = domain.cell_centers(n)
    oracle = gibbs_oracle(strategy, grid)

    def cell(frac):
        hi = -L + 2 * L * frac
        h = (hi + L) / n
        x = (-L + h * (np.arange(n) + 0.5))[:, None]
        traj = evolve_reference(WeightedEnsemble(x, np.ones(n), domain), strategy, config["warm_start.horizon"],
                                config["warm_start.dt"])
        final = traj.final
        outside = float(final.masses[final.positions[:, 0] > hi].sum())
        # restricted oracle: Gibbs mass on the covered part only
        covered = oracle.weights * (grid[:, 0] <= hi)
        restricted = WeightedEnsemble(grid, covered * n / covered.sum())
        return (wasserstein_1d(final, oracle, 1), wasserstein_1d(restricted, oracle, 1), outside)

    results = _map(cell, overlaps, threads)
    report = StudyReport("warm-start", ["overlap"], config_hash=config.digest(), seeds=[config["seed"]])
    by_overlap = dict(zip(overlaps, results))
    for frac, (err, lower, outside) in by_overlap.items():
        c = {"overlap": frac}
        report.add(c, "w1_to_gibbs", err, criterion="WARM")
        report.add(c, "w1_restricted_oracle", lower, criterion="WARM")
        report.add(c, "mass_outside_initial_support", outside, criterion="WARM",
                   verdict="pass" if outside == 0 else "fail")
    full = by_overlap.get(1.0)
    partial = [r for f, r in by_overlap.items() if f < 1.0]
    ok = all(r[2] == 0 for r in results)
    if full is not None and partial:
        ok &= all(full[0] < r[0] for r in partial)
    report.verdicts["WARM"] = bool(ok)
    return report
