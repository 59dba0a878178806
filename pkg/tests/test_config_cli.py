import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from frflow import cli
from frflow.config import SCHEMA, ConfigError, parse_config, parse_text, serialize, validate
from frflow.experiments import StudyReport

SMALL_RUN = """\
seed = 3
[simulation]
horizon = 0.1
n_particles = 16
"""


def test_defaults_filled_from_empty_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("")
    cfg = parse_config(path)
    assert all(cfg[k] == spec.default for k, spec in SCHEMA.items())


def test_negative_sigma_names_the_key():
    with pytest.raises(ConfigError) as info:
        parse_text("[drift]\nsigma = -1\n")
    assert info.value.errors[0]["key"] == "drift.sigma"
    assert info.value.errors[0]["line"] == 2


def test_all_errors_are_collected_with_lines():
    text = "[drift]\nsigma = 0\n\n[kernel]\nbogus = 1\nepsilon = -2\n"
    with pytest.raises(ConfigError) as info:
        parse_text(text)
    got = {(e["key"], e["line"]) for e in info.value.errors}
    assert got == {("drift.sigma", 2), ("kernel.bogus", 5), ("kernel.epsilon", 6)}


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found|No such|missing"):
        parse_config(tmp_path / "nope.toml")


@given(
    seed=st.integers(0, 2**31),
    sigma=st.floats(1e-3, 10, allow_nan=False),
    eps=st.floats(1e-3, 1, allow_nan=False),
    variant=st.sampled_from(["K1", "K2", "K3", "K4", "chi2"]),
    n_list=st.lists(st.integers(1, 50), min_size=1, max_size=5, unique=True).map(sorted),
    renorm=st.booleans(),
)
def test_serialize_round_trip(seed, sigma, eps, variant, n_list, renorm):
    cfg = validate({"seed": seed, "drift.sigma": sigma, "kernel.epsilon": eps, "drift.variant": variant,
                    "poc.n_list": n_list, "simulation.renormalize": renorm})
    again = parse_text(serialize(cfg))
    assert again == cfg and again.digest() == cfg.digest()


def test_digest_ignores_output_dir(standard):
    assert standard.replace(output__dir="elsewhere").digest() == standard.digest()
    assert standard.replace(seed=1).digest() != standard.digest()


def _run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    text = capsys.readouterr().out
    for key, spec in SCHEMA.items():
        assert key in text and spec.owner in text


def test_constants_table_contains_k1_value(tmp_path, capsys):
    code, out, _ = _run(["constants", "--out", str(tmp_path)], capsys)
    assert code == 0
    from frflow.drift import drift_bound_constant

    header = out.splitlines()[0].split(",")
    row = dict(zip(header, next(line for line in out.splitlines() if line.startswith("K1,")).split(",")))
    f = {k: float(v) for k, v in row.items() if k not in ("variant", "note")}
    recomputed = drift_bound_constant("K1", cli.strategy_constants(validate({}).strategy(variant="K1")).kernel,
                                      (f["pi_min"], f["pi_max"], f["lip_pi"]), f["C_F"], 1.0)
    assert f["bound"] == pytest.approx(recomputed, rel=1e-9)
    assert (tmp_path / "constants.csv").read_text() == out


def test_run_is_byte_identical(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMALL_RUN)
    outputs = []
    for name in ("a", "b"):
        code, _, _ = _run(["run", "--config", str(cfg), "--out", str(tmp_path / name)], capsys)
        assert code == 0
        outputs.append({p.name: p.read_bytes() for p in (tmp_path / name).iterdir()})
    a, b = outputs
    assert set(a) == {"trajectory.csv", "positions.csv", "diagnostics.csv", "config.toml", "manifest.json"}
    for name in a:
        if name != "config.toml":
            assert a[name] == b[name], name
    assert not any(n.endswith(".tmp") for n in a)


def test_seed_flag_overrides_config(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMALL_RUN)
    _run(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "11"], capsys)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 11 and manifest["command"] == "run"


def test_decreasing_n_list_is_a_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[poc]\nn_list = [64, 16]\n")
    code, _, err = _run(["poc", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == 1
    body = json.loads(err.splitlines()[-1])
    assert body["error"] == "config" and body["errors"][0]["key"] == "poc.n_list"
    assert not (tmp_path / "o").exists()


def test_bad_config_reports_every_error(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[drift]\nsigma = -1\n[nope]\nx = 1\n")
    code, _, err = _run(["run", "--config", str(cfg)], capsys)
    assert code == 1
    keys = {e["key"] for e in json.loads(err)["errors"]}
    assert keys == {"drift.sigma", "nope.x"}


def test_kernel_floor_violation_is_numerical(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    # K4 evaluates K*mu on quadrature nodes far from both atoms, where the narrow truncated kernel is 0
    cfg.write_text("[simulation]\nhorizon = 0.1\nn_particles = 2\n[drift]\nvariant = \"K4\"\n"
                   '[kernel]\nmode = "truncated_gaussian"\nepsilon = 0.01\nkappa = 0.0\n')
    code, _, err = _run(["run", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    assert json.loads(err)["error"] == "numerical"
    assert not (tmp_path / "o").exists()


def test_failed_verdict_exits_three(tmp_path, capsys, monkeypatch):
    import frflow.experiments as ex

    def failing(config, threads=1):
        r = StudyReport("warm-start", ["overlap"])
        r.add({"overlap": 1.0}, "w1_to_gibbs", 1.0, verdict="fail", criterion="WARM")
        r.verdicts["WARM"] = False
        return r

    monkeypatch.setattr(ex, "run_warm_start_study", failing)
    code, _, err = _run(["warm-start", "--out", str(tmp_path)], capsys)
    assert code == 3 and json.loads(err)["error"] == "verdict"
    assert json.loads((tmp_path / "warm_start.json").read_text())["passed"] is False


def test_threads_must_be_positive(capsys):
    code, _, err = _run(["constants", "--threads", "0"], capsys)
    assert code == 1 and "--threads" in err
