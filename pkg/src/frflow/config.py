"""Run configuration: a TOML file of dotted keys, validated against a fixed schema."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .drift import Centering, DriftStrategy, Variant
from .dynamics import Scheme, SimulationConfig
from .functionals import POTENTIALS, ReferenceMeasure, build_energy
from .kernels import KernelMode, MollifierSpec
from .measures import Domain


class ConfigError(ValueError):
    def __init__(self, errors: list[dict]):
        self.errors = errors
        lines = [f"{e['key']}" + (f" (line {e['line']})" if e.get("line") else "") + f": {e['message']}" for e in errors]
        super().__init__("; ".join(lines))


@dataclass(frozen=True)
class Key:
    default: Any
    kind: type | tuple
    owner: str
    doc: str
    check: Callable[[Any], str | None] | None = None


def _positive(v):
    return None if v > 0 else "must be > 0"


def _nonnegative(v):
    return None if v >= 0 else "must be >= 0"


def _at_least(n):
    return lambda v: None if v >= n else f"must be >= {n}"


def _choice(*options):
    return lambda v: None if v in options else f"must be one of {list(options)}"


def _increasing_positive_ints(v):
    if not v or any(not isinstance(x, int) or isinstance(x, bool) or x < 1 for x in v):
        return "must be a nonempty list of positive integers"
    return None if all(a < b for a, b in zip(v, v[1:])) else "must be strictly increasing"


def _decreasing_positive(v):
    if not v or any(not isinstance(x, (int, float)) or x <= 0 for x in v):
        return "must be a nonempty list of positive numbers"
    return None if all(a > b for a, b in zip(v, v[1:])) else "must be strictly decreasing"


def _fractions(v):
    if not v or any(not isinstance(x, (int, float)) or not 0 < x <= 1 for x in v):
        return "must be a nonempty list of numbers in (0, 1]"
    return None


def _variants(v):
    names = [x.value for x in Variant]
    if not v or any(x not in names for x in v):
        return f"must be a nonempty list drawn from {names}"
    return None


SCHEMA: dict[str, Key] = {
    "seed": Key(0, int, "cli", "base random seed", _nonnegative),
    "domain.dimension": Key(1, int, "measures", "dimension d of the box", _choice(1, 2)),
    "domain.half_width": Key(1.0, float, "measures", "half width L of the box [-L, L]^d", _positive),
    "kernel.mode": Key("free_gaussian", str, "kernels", "mollifier mode", _choice(*[m.value for m in KernelMode])),
    "kernel.epsilon": Key(0.25, float, "kernels", "mollifier standard deviation", _positive),
    "kernel.kappa": Key(0.0, float, "kernels", "constant floor added to the kernel", _nonnegative),
    "energy.kind": Key("linear", str, "functionals", "energy functional",
                       _choice("zero", "linear", "quadratic_interaction", "two_layer_regression")),
    "energy.centered": Key(True, bool, "functionals", "subtract the measure mean from the flat derivative"),
    "energy.params.f": Key("square", str, "functionals", "potential of the linear energy", _choice("square", "cosine")),
    "energy.params.k": Key("product", str, "functionals", "interaction kernel", _choice("product", "gaussian")),
    "energy.params.n_features": Key(4, int, "functionals", "features of the two-layer model (<= 8)",
                                    lambda v: None if 1 <= v <= 8 else "must be in [1, 8]"),
    "energy.params.seed": Key(0, int, "functionals", "seed of the two-layer model data", _nonnegative),
    "reference.potential": Key("quadratic", str, "functionals", "potential U of pi = e^-U / Z",
                               _choice(*POTENTIALS)),
    "reference.scale": Key(1.0, float, "functionals", "multiplier of the potential", _nonnegative),
    "reference.grid_points": Key(2048, int, "functionals", "midpoint grid per axis for Z", _at_least(16)),
    "drift.variant": Key("K3", str, "drift", "kernelization strategy", _choice(*[v.value for v in Variant])),
    "drift.sigma": Key(1.0, float, "drift", "entropy weight", _positive),
    "drift.centering": Key("empirical_mean", str, "drift", "KL centering for K1/K2/K4",
                           _choice(*[c.value for c in Centering])),
    "drift.quadrature_nodes": Key(64, int, "drift", "Gauss-Legendre nodes per panel", _at_least(1)),
    "drift.kl_grid_points": Key(2048, int, "drift", "Lebesgue quadrature nodes per axis", _at_least(8)),
    "simulation.horizon": Key(2.0, float, "dynamics", "final time T", _nonnegative),
    "simulation.dt": Key(0.01, float, "dynamics", "time step", _positive),
    "simulation.scheme": Key("exponential_euler", str, "dynamics", "time stepping scheme",
                             _choice(*[s.value for s in Scheme])),
    "simulation.renormalize": Key(True, bool, "dynamics", "renormalize weights to sum N after every step"),
    "simulation.n_particles": Key(256, int, "dynamics", "particles N for `run`", _at_least(1)),
    "simulation.initial_sampler": Key("uniform", str, "dynamics", "law of the initial positions",
                                      _choice("uniform", "reference")),
    "simulation.initial_weights": Key([], list, "dynamics", "custom initial weights; empty means all ones"),
    "mean_field.n_atoms": Key(8192, int, "dynamics", "quadrature atoms of the reference law", _at_least(64)),
    "mean_field.refine_atoms": Key(16384, int, "dynamics", "atoms of the refinement run for the floor", _at_least(64)),
    "mean_field.dt": Key(0.0025, float, "dynamics", "RK4 step of the reference", _positive),
    "poc.n_list": Key([16, 64, 256, 1024], list, "experiments", "particle counts", _increasing_positive_ints),
    "poc.n_seeds": Key(32, int, "experiments", "seeds per particle count", _at_least(2)),
    "sweep.epsilons": Key([0.4, 0.2, 0.1, 0.05], list, "experiments", "mollifier widths", _decreasing_positive),
    "sweep.grid_points": Key(2048, int, "experiments", "grid of the minimizer densities", _at_least(64)),
    "sweep.tol": Key(1e-4, float, "experiments", "mass-weighted drift residual ending the polish", _positive),
    "sweep.max_iter": Key(20000, int, "experiments", "polish iteration cap", _at_least(1)),
    "audit.variants": Key(["K1", "K2", "K3", "K4", "chi2"], list, "experiments", "strategies audited", _variants),
    "audit.n_samples": Key(1000, int, "experiments", "samples per check", _at_least(1)),
    "audit.max_atoms": Key(32, int, "experiments", "largest sampled ensemble", _at_least(1)),
    "warm_start.overlaps": Key([1.0, 0.75, 0.5, 0.25], list, "experiments", "initial support fractions", _fractions),
    "warm_start.horizon": Key(10.0, float, "experiments", "flow time of the warm-start runs", _positive),
    "warm_start.n_atoms": Key(1024, int, "experiments", "atoms per warm-start run", _at_least(64)),
    "warm_start.dt": Key(0.01, float, "experiments", "RK4 step of the warm-start runs", _positive),
    "output.stride": Key(1, int, "dynamics", "store every k-th state", _at_least(1)),
    "output.dir": Key("out", str, "cli", "output directory"),
}


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, path + "."))
        else:
            out[path] = v
    return out


_HEADER = re.compile(r"^\s*\[([^\[\]]+)\]\s*(#.*)?$")
_ASSIGN = re.compile(r"^\s*([A-Za-z0-9_.\"' -]+?)\s*=")


def _key_lines(text: str) -> dict[str, int]:
    lines = {}
    table = ""
    for no, line in enumerate(text.splitlines(), 1):
        m = _HEADER.match(line)
        if m:
            table = m.group(1).strip().replace(" ", "") + "."
            continue
        m = _ASSIGN.match(line)
        if m:
            key = m.group(1).replace(" ", "").replace('"', "").replace("'", "")
            lines.setdefault(table + key, no)
    return lines


@dataclass(frozen=True, eq=False)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def replace(self, **updates) -> "RunConfig":
        vals = dict(self.values)
        for k, v in updates.items():
            vals[k.replace("__", ".")] = v
        return validate(vals)

    def digest(self) -> str:
        """Hash of the serialized config; the output directory does not affect results and is left out."""
        text = "".join(line for line in serialize(self).splitlines(True) if not line.startswith("output.dir "))
        return hashlib.sha256(text.encode()).hexdigest()

    def domain(self) -> Domain:
        return Domain(self["domain.dimension"], self["domain.half_width"])

    def kernel(self, epsilon: float | None = None) -> MollifierSpec:
        return MollifierSpec(self["kernel.epsilon"] if epsilon is None else epsilon, self.domain(),
                             self["kernel.mode"], self["kernel.kappa"])

    def energy(self):
        params = {k.split(".")[-1]: self[k] for k in SCHEMA if k.startswith("energy.params.")}
        return build_energy(self["energy.kind"], self.domain(), self["energy.centered"], **params)

    def reference(self) -> ReferenceMeasure:
        return ReferenceMeasure.named(self["reference.potential"], self.domain(), self["reference.scale"],
                                      self["reference.grid_points"])

    def strategy(self, variant=None, epsilon=None, sigma=None) -> DriftStrategy:
        grid = self["drift.kl_grid_points"]
        if self["domain.dimension"] == 2:
            grid = min(grid, 256)
        return DriftStrategy(
            Variant(variant or self["drift.variant"]),
            self["drift.sigma"] if sigma is None else sigma,
            self.kernel(epsilon),
            self.energy(),
            self.reference(),
            Centering(self["drift.centering"]),
            self["drift.quadrature_nodes"],
            grid,
        )

    def simulation(self) -> SimulationConfig:
        return SimulationConfig(self["simulation.horizon"], self["simulation.dt"], self["simulation.scheme"],
                                self["simulation.renormalize"], self["seed"], self["output.stride"])


def _coerce(key: str, value, spec: Key):
    kind = spec.kind
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value), None
    if kind is int and isinstance(value, bool):
        return value, f"expected {kind.__name__}, got bool"
    if not isinstance(value, kind):
        return value, f"expected {kind.__name__}, got {type(value).__name__}"
    float_items = kind is list and bool(spec.default) and isinstance(spec.default[0], float)
    if float_items:
        value = [float(x) if isinstance(x, int) and not isinstance(x, bool) else x for x in value]
    return value, None


def validate(raw: dict, lines: dict[str, int] | None = None) -> RunConfig:
    """Fill defaults and check every key; raises :class:`ConfigError` listing all problems."""
    lines = lines or {}
    errors = []
    values = {}
    for key, value in raw.items():
        if key not in SCHEMA:
            errors.append({"key": key, "line": lines.get(key), "message": "unknown key"})
    for key, spec in SCHEMA.items():
        if key not in raw:
            values[key] = list(spec.default) if isinstance(spec.default, list) else spec.default
            continue
        value, err = _coerce(key, raw[key], spec)
        if err is None and spec.check is not None:
            err = spec.check(value)
        if err is None and key == "simulation.initial_weights":
            if any(not isinstance(x, (int, float)) or isinstance(x, bool) or x < 0 for x in value):
                err = "must be a list of nonnegative numbers"
            else:
                value = [float(x) for x in value]
        if err:
            errors.append({"key": key, "line": lines.get(key), "message": err})
        values[key] = value
    if not errors:
        if values["simulation.horizon"] > 0 and values["simulation.dt"] > values["simulation.horizon"]:
            errors.append({"key": "simulation.dt", "line": lines.get("simulation.dt"),
                           "message": "must not exceed simulation.horizon"})
        if values["simulation.initial_weights"] and len(values["simulation.initial_weights"]) != values["simulation.n_particles"]:
            errors.append({"key": "simulation.initial_weights", "line": lines.get("simulation.initial_weights"),
                           "message": "length must equal simulation.n_particles"})
    if errors:
        raise ConfigError(errors)
    return RunConfig(values)


def parse_text(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError([{"key": "<file>", "line": int(m.group(1)) if m else None, "message": str(exc)}]) from exc
    return validate(_flatten(data), _key_lines(text))


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError([{"key": "<file>", "line": None, "message": f"config file not found: {p}"}])
    return parse_text(p.read_text())


def _literal(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_literal(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__}")


def serialize(config: RunConfig) -> str:
    """Dotted-key TOML with every schema key, in schema order."""
    return "".join(f"{k} = {_literal(config[k])}\n" for k in SCHEMA)


def help_text() -> str:
    rows = [f"  {k} = {_literal(s.default)}  [{s.owner}] {s.doc}" for k, s in SCHEMA.items()]
    return "config keys (key = default  [module] meaning):\n" + "\n".join(rows)
