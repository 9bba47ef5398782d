import os
import subprocess
import sys

import numpy as np
import pytest

from ebmcredit import experiments as ex
from ebmcredit.cli import main

SMALL = ["--net", "12,8,6,4", "--subset", "128", "--test-subset", "64", "--batch-size", "16"]


@pytest.fixture(autouse=True)
def _no_env_data(monkeypatch):
    monkeypatch.delenv("EBM_DATA_DIR", raising=False)


def _summary(path):
    out = {}
    for line in open(path):
        k, _, v = line.rstrip("\n").partition("=")
        out[k] = v
    return out


def test_default_configs_and_hash():
    cfg = ex.default_config("fig2c")
    assert len(cfg.lambda_values) == 10 and cfg.lambda_values[0] == pytest.approx(1e-3)
    assert ex.default_config("fig3a").seeds == tuple(range(20))
    assert ex.default_config("fig2a", output_dir="x").config_hash == ex.default_config("fig2a", jobs=4).config_hash
    assert ex.default_config("fig2a").config_hash != ex.default_config("fig2a", seeds=(1,)).config_hash
    with pytest.raises(ValueError):
        ex.ExperimentConfig("fig9")


def test_fig2a_cli_writes_csv_summary_and_plot(tmp_path, capsys):
    code = main(["fig2a", "--seed", "0,1", "--out", str(tmp_path)] + SMALL)
    out = capsys.readouterr().out
    assert "status=" in out
    csv_lines = open(tmp_path / "fig2a.csv").read().splitlines()
    assert csv_lines[0] == "# experiment=fig2a"
    assert csv_lines[4] == "seed,step,internal,supervised,total"
    assert len(csv_lines) == 5 + 2 * 51
    s = _summary(tmp_path / "fig2a_summary.txt")
    assert s["check.internal0_zero"] == "PASS" and s["check.initial_slope_match"] == "PASS"
    assert code == (0 if s["status"] == "PASS" else 1)
    assert (tmp_path / "fig2a.png").stat().st_size > 0


def test_rerun_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["fig2b", "--seed", "0,1,2", "--no-plots", "--out", str(tmp_path / d)] + SMALL) in (0, 1)
    for name in ("fig2b.csv", "fig2b_seeds.csv", "fig2b_summary.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert not (tmp_path / "a" / "fig2b.png").exists()


def test_parallel_seeds_match_serial(tmp_path):
    for d, jobs in (("serial", "1"), ("parallel", "2")):
        main(["fig2c", "--seed", "0,1", "--steps", "100", "--jobs", jobs, "--no-plots", "--out", str(tmp_path / d)] + SMALL)
    assert (tmp_path / "serial" / "fig2c.csv").read_bytes() == (tmp_path / "parallel" / "fig2c.csv").read_bytes()


def test_failing_check_gives_nonzero_exit(tmp_path):
    # a unit nudge is far from the small-nudge limit, so the cosine check fails
    code = main(["fig3c", "--lambda", "1.0", "--batches", "3", "--no-plots", "--out", str(tmp_path)] + SMALL)
    assert code == 1
    assert _summary(tmp_path / "fig3c_summary.txt")["check.cosine_never_below_0_999"] == "FAIL"


def test_train_cli(tmp_path):
    code = main(["train", "--rule", "first_step", "--lr-w", "0.01", "--out", str(tmp_path)] + SMALL)
    assert code == 0
    s = _summary(tmp_path / "train_summary.txt")
    assert s["rule"] == "first_step" and s["data"] == "synthetic"
    assert 0.0 <= float(s["test_accuracy"]) <= 1.0


def test_gradcheck_cli(tmp_path):
    code = main(["gradcheck", "--seed", "0,1", "--no-plots", "--out", str(tmp_path)])
    assert code == 0
    lines = open(tmp_path / "gradcheck.csv").read().splitlines()
    assert lines[4] == "check,config,value,threshold,pass"
    assert all(line.endswith("PASS") for line in lines[5:])


def test_unknown_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["fig2a", "--bogus"])
    assert e.value.code == 2


def test_console_script_runs(tmp_path):
    r = subprocess.run([sys.executable, "-m", "ebmcredit.cli", "fig2a", "--seed", "0", "--no-plots",
                        "--out", str(tmp_path)] + SMALL, capture_output=True, text=True)
    assert r.returncode in (0, 1)
    assert "check.internal0_zero=PASS" in r.stdout


def test_prepare_data_and_env_fallback(tmp_path, monkeypatch):
    pytest.importorskip("mlxtend")
    data = tmp_path / "mnist"
    assert main(["prepare-data", "--out", str(data), "--test-size", "500"]) == 0
    monkeypatch.setenv("EBM_DATA_DIR", str(data))
    cfg = ex.default_config("train", subset=None)
    assert ex.data_source(cfg) == "mnist"
    assert len(ex.load_split(cfg, "train")) == 4500
    assert len(ex.load_split(cfg, "test")) == 500


def test_fig2a_energy_phenomenon_on_mnist(mnist_dir):
    res = ex.run_fig2a(ex.default_config("fig2a", data_dir=mnist_dir))
    assert res.checks["internal0_zero"]
    assert res.checks["initial_slope_match"]
    assert res.checks["supervised_decreasing_first_10"]


def _per_seed_monotone(res):
    rows = res.tables["fig2b_seeds"][1]
    count = 0
    for s in {r[0] for r in rows}:
        d = np.array([r[2] for r in rows if r[0] == s])
        count += bool(np.all(np.diff(d) >= 0.0))
    return count


def test_backprop_direction_distance_grows_with_steps_tanh(mnist_dir):
    res = ex.run_fig2b(ex.default_config("fig2b", data_dir=mnist_dir, activation="tanh"))
    assert all(res.checks.values())
    assert _per_seed_monotone(res) >= 8


@pytest.mark.xfail(strict=False, reason="relu kinks make fixed-step relaxation chatter; distances dip by up to 0.06")
def test_backprop_direction_distance_grows_with_steps_relu(mnist_dir):
    res = ex.run_fig2b(ex.default_config("fig2b", data_dir=mnist_dir))
    assert _per_seed_monotone(res) >= 8


def test_fig2b_checks_pass_on_mnist(mnist_dir):
    res = ex.run_fig2b(ex.default_config("fig2b", data_dir=mnist_dir))
    assert res.passed
