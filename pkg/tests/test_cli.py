import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mrgmm import cli, report
from mrgmm.model import Dataset


def test_defaults_then_file_then_flags(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# sweep\ncommand = coverage\nn = 50, 200\ndelta = 0,-0.6\nB = 99\nseed = 3\n")
    cfg = cli.resolve_config(["--config", str(cfg_file), "--seed", "8"])
    assert cfg.command == "coverage"
    assert cfg.n == (50, 200) and cfg.delta == (0.0, -0.6)
    assert cfg.B == 99 and cfg.seed == 8
    assert cfg.rho == 0.5


def test_positional_and_flag_command_conflict():
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(["estimate", "--command", "power"])


@pytest.mark.parametrize("argv", [
    ["coverage", "--r", "0"],
    ["coverage", "--B", "x"],
    ["coverage", "--levels", "1.5"],
    ["coverage", "--ci-kinds", "C,ZZ"],
    ["coverage", "--model", "sample_mean"],
    ["power", "--n", "50,100"],
    ["estimate", "--model", "sample_mean"],
    ["frobnicate"],
])
def test_bad_configs_exit_2(argv, tmp_path, capsys):
    assert cli.main(argv + ["--out", str(tmp_path)]) == 2
    assert "usage error" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("command = ci\nwibble = 3\n")
    assert cli.main(["--config", str(tmp_path / "c.cfg")]) == 2
    assert "wibble" in capsys.readouterr().err


def test_argparse_error_exit_2(capsys):
    assert cli.main(["--no-such-flag"]) == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    # all-equal observations: the centered weight is singular
    Dataset(np.ones((5, 1)), ("x",)).to_csv(tmp_path / "flat.csv")
    code = cli.main(["estimate", "--model", "sample_mean", "--data", str(tmp_path / "flat.csv"),
                     "--estimator", "two-step", "--out", str(tmp_path / "o")])
    assert code == 1
    assert "SingularWeightError" in capsys.readouterr().err


def test_estimate_sample_mean_csv(tmp_path, capsys):
    x = np.random.default_rng(0).lognormal(size=40)
    Dataset(x[:, None], ("x",)).to_csv(tmp_path / "x.csv")
    out = tmp_path / "o"
    assert cli.main(["estimate", "--model", "sample_mean", "--data", str(tmp_path / "x.csv"), "--out", str(out)]) == 0
    rows = report.read_results_csv(out / "results.csv")
    est = {r["kind"]: r for r in rows}
    assert_allclose(float(est["MR"]["estimate"]), x.mean(), rtol=1e-12)
    assert_allclose(float(est["MR"]["se"]), float(est["C"]["se"]), rtol=1e-10)
    assert (out / "table.txt").exists() and (out / "manifest.json").exists()


def test_ci_example2(tmp_path, capsys):
    out = tmp_path / "o"
    code = cli.main(["ci", "--model", "example2", "--delta", "0.5", "--n", "200", "--B", "99",
                     "--levels", "0.9", "--out", str(out)])
    assert code == 0
    rows = report.read_results_csv(out / "results.csv")
    assert [r["kind"] for r in rows] == ["C", "MR", "HH*", "BN*", "MR*"]
    for r in rows:
        assert float(r["lo"]) <= float(r["estimate"]) <= float(r["hi"])
        assert r["covered"] in ("0", "1")


def test_coverage_deterministic_across_threads(tmp_path, capsys):
    args = ["coverage", "--n", "50", "--delta", "0,-0.6", "--r", "12", "--B", "29", "--seed", "7"]
    assert cli.main(args + ["--threads", "1", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--threads", "3", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    assert (tmp_path / "a" / "figure.svg").exists()


def test_power_command(tmp_path, capsys):
    out = tmp_path / "p"
    assert cli.main(["power", "--r", "20", "--B", "19", "--ci-kinds", "C,MR*", "--grid-points", "5",
                     "--out", str(out)]) == 0
    rows = report.read_results_csv(out / "results.csv")
    assert len(rows) == 2 * 5
    assert (out / "figure.svg").read_text().count("<polyline") == 2


def test_selftest_console_script():
    res = subprocess.run([sys.executable, "-m", "mrgmm", "selftest"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "6/6 checks passed" in res.stdout


def test_plugin_model(tmp_path, monkeypatch):
    (tmp_path / "mymodels.py").write_text(
        "from mrgmm.models import sample_mean\n\ndef build():\n    return sample_mean()\n"
    )
    monkeypatch.syspath_prepend(str(tmp_path))
    assert cli.load_model("mymodels:build").name == "sample_mean"
    with pytest.raises(cli.ConfigError):
        cli.load_model("mymodels:missing")
