"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 failed
study verdict. Errors are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, help_text, parse_config, serialize, validate
from .drift import Variant, strategy_constants
from .functionals import NonFiniteEnergyError
from .kernels import KernelFloorError
from .measures import NonFiniteIntegrandError, WeightedEnsemble
from .dynamics import initial_density, sample_positions, simulate_interacting, solve_mean_field

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERDICT = 0, 1, 2, 3


def _write_all(out_dir: Path, files: dict[str, str]):
    """Write every file through a temp file and rename, after all content is ready."""
    out_dir.mkdir(parents=True, exist_ok=True)
    umask = os.umask(0)
    os.umask(umask)
    for name, text in files.items():
        fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            os.chmod(tmp, 0o666 & ~umask)  # mkstemp creates 0600
            os.replace(tmp, out_dir / name)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def _manifest(cfg: RunConfig, command: str, extra: dict | None = None) -> str:
    body = {"command": command, "config_hash": cfg.digest(), "seed": cfg["seed"], "version": __version__}
    body.update(extra or {})
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


def _initial_ensemble(cfg: RunConfig) -> WeightedEnsemble:
    domain = cfg.domain()
    n = cfg["simulation.n_particles"]
    rng = np.random.default_rng(cfg["seed"])
    x = sample_positions(domain, n, rng, cfg["simulation.initial_sampler"], cfg.reference())
    w = np.asarray(cfg["simulation.initial_weights"] or np.ones(n), dtype=float)
    return WeightedEnsemble(x, w * n / w.sum(), domain)


def cmd_run(cfg: RunConfig, threads: int) -> tuple[dict[str, str], bool]:
    traj = simulate_interacting(cfg.simulation(), cfg.strategy(), _initial_ensemble(cfg))
    return {
        "trajectory.csv": traj.to_csv(),
        "positions.csv": traj.positions_csv(),
        "diagnostics.csv": traj.diagnostics_csv(),
    }, True


def cmd_mean_field(cfg: RunConfig, threads: int) -> tuple[dict[str, str], bool]:
    domain = cfg.domain()
    n = cfg["mean_field.n_atoms"]
    dt_ref = cfg["mean_field.dt"]
    sim = cfg.simulation()
    stride = max(1, int(round(sim.dt * sim.stride / dt_ref)))
    density = initial_density(domain, cfg["simulation.initial_sampler"], cfg.reference(),
                              round(n ** (1 / domain.dimension)))
    traj = solve_mean_field(density, n, cfg.strategy(), sim.horizon, dt_ref, stride=stride, record_energy=True)
    return {
        "mean_field_trajectory.csv": traj.to_csv(),
        "mean_field_positions.csv": traj.positions_csv(),
        "mean_field_diagnostics.csv": traj.diagnostics_csv(),
    }, True


def _study(name, runner):
    def cmd(cfg: RunConfig, threads: int):
        report = runner(cfg, threads=threads)
        return {f"{name}.csv": report.to_csv(), f"{name}.json": report.to_json()}, report.passed

    return cmd


def constants_table(cfg: RunConfig) -> str:
    rows = ["variant,bound,lipschitz,k_min,k_max,lip_k,pi_min,pi_max,lip_pi,C_F,L_F,note"]
    for v in Variant:
        c = strategy_constants(cfg.strategy(variant=v))
        note = "; ".join(n for n in c.notes if not n.startswith("C_F/L_F"))
        rows.append(",".join([v.value, *(f"{x:.10g}" for x in (
            c.bound, c.lipschitz, c.kernel.k_min, c.kernel.k_max, c.kernel.lip, *c.reference, c.C_F, c.L_F)),
            f'"{note}"']))
    return "\n".join(rows) + "\n"


def cmd_constants(cfg: RunConfig, threads: int) -> tuple[dict[str, str], bool]:
    table = constants_table(cfg)
    sys.stdout.write(table)
    return {"constants.csv": table}, True


def _commands():
    from .experiments import run_constants_audit, run_epsilon_sweep, run_poc_scaling, run_warm_start_study

    return {
        "run": cmd_run,
        "mean-field": cmd_mean_field,
        "poc": _study("poc", run_poc_scaling),
        "sweep-eps": _study("sweep_eps", run_epsilon_sweep),
        "audit": _study("audit", run_constants_audit),
        "warm-start": _study("warm_start", run_warm_start_study),
        "constants": cmd_constants,
    }


SUBCOMMANDS = ("run", "mean-field", "poc", "sweep-eps", "audit", "warm-start", "constants")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file (dotted keys); defaults apply when omitted")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads for study cells")
    common.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    parser = argparse.ArgumentParser(
        prog="frflow",
        description="Weighted-particle Fisher-Rao flows with kernelized entropy.",
        epilog=help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    docs = {
        "run": "simulate the interacting particle system",
        "mean-field": "solve the deterministic mean-field reference",
        "poc": "propagation-of-chaos study",
        "sweep-eps": "mollifier-width sweep of energy minimizers",
        "audit": "sampled audit of the drift constants",
        "warm-start": "sensitivity to the initial support",
        "constants": "print the bound and Lipschitz constants of every strategy",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, help=docs[name], parents=[common], epilog=help_text(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def _emit_error(kind: str, message: str, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else validate({})
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["output__dir"] = str(args.out)
        if overrides:
            cfg = cfg.replace(**overrides)
        if args.threads < 1:
            raise ConfigError([{"key": "--threads", "line": None, "message": "must be >= 1"}])
    except ConfigError as exc:
        _emit_error("config", str(exc), errors=exc.errors)
        return EXIT_CONFIG

    try:
        files, passed = _commands()[args.command](cfg, args.threads)
    except ConfigError as exc:
        _emit_error("config", str(exc), errors=exc.errors)
        return EXIT_CONFIG
    except (ArithmeticError, KernelFloorError, NonFiniteEnergyError, NonFiniteIntegrandError) as exc:
        _emit_error("numerical", str(exc), type=type(exc).__name__)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # remaining value errors are inconsistent settings caught by the studies (e.g. grid sizes)
        _emit_error("config", str(exc), type=type(exc).__name__)
        return EXIT_CONFIG

    files["config.toml"] = serialize(cfg)
    files["manifest.json"] = _manifest(cfg, args.command, {"passed": bool(passed)})
    _write_all(Path(cfg["output.dir"]), files)
    if not passed:
        _emit_error("verdict", f"{args.command} study failed its verdict")
        return EXIT_VERDICT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
