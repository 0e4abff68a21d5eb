import json

import numpy as np
import pytest
import yaml

from qpreduce.cli import main
from qpreduce.config import ConfigError, bundled_presets, load_config
from qpreduce.pipeline import ExitCode
from qpreduce.symbols import HypothesisViolation


def test_presets_load():
    names = bundled_presets()
    assert {"duffing-l2", "duffing-l2-n1", "harmonic-certified", "harmonic-resonant", "free-l2"} <= set(names)
    for name in names:
        cfg = load_config(name)
        assert cfg.omega.size == cfg.n_freq
        assert cfg.beta < 2 * cfg.potential.ell - 1


def test_overrides_and_hash():
    cfg = load_config("duffing-l2")
    other = load_config("duffing-l2", overrides=["eps=2e-3", "kam.K=6"])
    assert other.eps == 2e-3 and other.raw["kam"]["K"] == 6
    assert other.hash() != cfg.hash()
    assert load_config("duffing-l2").hash() == cfg.hash()
    with pytest.raises(ConfigError):
        load_config("duffing-l2", overrides=["eps"])


def test_file_with_preset_base(tmp_path):
    path = tmp_path / "mine.yaml"
    path.write_text(yaml.safe_dump({"preset": "free-l2", "eps": 1e-4}))
    cfg = load_config(path)
    assert cfg.eps == 1e-4 and cfg.potential.ell == 2


@pytest.mark.parametrize(
    "overrides",
    [
        ["W0={form: bracket_power, beta: 3.0, const: 1.0}"],  # beta0 = 2 ell - 1
        ["W0={form: bracket_power, beta: 4.0, const: 1.0}"],  # beta0 = 2 ell
        ["W1={form: bracket_power, beta: 2.5, const: 1.0}"],  # beta1 > ell
    ],
)
def test_hypothesis_gate(overrides):
    with pytest.raises(HypothesisViolation):
        load_config("duffing-l2", overrides=overrides)
    cfg = load_config("duffing-l2", overrides=overrides, allow_out_of_hypothesis=True)
    assert cfg.raw["allow_out_of_hypothesis"] is True


@pytest.mark.parametrize(
    "override",
    ["omega=[0.5, 1.5]", "omega=[1.5]", "eps=1.5", "discretization.n_modes=200", "W0={form: nonsense}"],
)
def test_invalid_configs(override):
    with pytest.raises(ConfigError):
        load_config("duffing-l2", overrides=[override])


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "-c", "duffing-l2", "--set", "W0={form: bracket_power, beta: 4.0, const: 1.0}"]) == ExitCode.HYPOTHESIS
    assert main(["run", "-c", "no-such-preset"]) == ExitCode.USAGE
    assert main(["run", "-c", "duffing-l2", "--set", "eps=3"]) == ExitCode.USAGE
    assert main(["sweep", "-c", "duffing-l2", "--axis", "eps", "--values"]) == ExitCode.USAGE
    assert main(["bogus-verb"]) == ExitCode.USAGE
    assert main(["report", str(tmp_path / "missing")]) == ExitCode.USAGE


def test_certify_omega_cli(capsys):
    assert main(["certify-omega", "--omega", "1.0,1.618033988749895", "--gamma", "0.1", "--tau", "2", "-K", "30"]) == ExitCode.OK
    assert main(["certify-omega", "--omega", "1.5,1.0", "--gamma", "0.1", "--tau", "2", "-K", "30"]) == ExitCode.NOT_CERTIFIED
    out = capsys.readouterr().out
    assert "(2, -3)" in out or "2,-3" in out.replace(" ", "") or "-2, 3" in out


def test_run_free_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "-c", "free-l2", "-o", str(a)]) == ExitCode.OK
    assert main(["run", "-c", "free-l2", "-o", str(b)]) == ExitCode.OK
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    assert {"summary.json", "manifest.json", "spectrum.csv", "norms.csv", "deviation.csv", "kam_trace.csv"} <= set(files)
    h = json.loads((a / "manifest.json").read_text())["config_hash"]
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
        assert h in (a / name).read_text(), name
    summary = json.loads((a / "summary.json").read_text())
    assert summary["simulation"]["max_deviation"] <= 1e-8
    capsys.readouterr()
    assert main(["report", str(a)]) == ExitCode.OK
    assert "exit 0 (OK)" in capsys.readouterr().out


def test_resonant_run_reports_kam_failure(tmp_path):
    out = tmp_path / "res"
    assert main(["run", "-c", "harmonic-resonant", "--no-simulate", "-o", str(out)]) == ExitCode.KAM
    err = json.loads((out / "error.json").read_text())
    assert err["stage"] == "kam" and err["exit_code"] == ExitCode.KAM
    assert (out / "kam_trace.csv").exists()
    # a later successful run into the same directory removes the stale error
    assert main(["run", "-c", "free-l2", "--no-simulate", "-o", str(out)]) == ExitCode.OK
    assert not (out / "error.json").exists()


def test_spectrum_verb(tmp_path):
    assert main(["spectrum", "-c", "free-l2", "-o", str(tmp_path), "--j-min", "10", "--j-max", "40"]) == ExitCode.OK
    fit = json.loads((tmp_path / "spectrum_fit.json").read_text())
    assert fit["fit"]["d_est"] == pytest.approx(4 / 3, abs=0.01)
    assert fit["fit"]["window"] == [10, 40]
    assert fit["orthonormality_defect"] <= 1e-10
    rows = np.loadtxt(tmp_path / "spectrum.csv", delimiter=",", comments="#", skiprows=2)
    assert rows.shape[0] == 60
