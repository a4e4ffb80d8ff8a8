import subprocess
import sys

import numpy as np
import pytest

from invdyn.cli import load_model, main
from invdyn.core import SystemState, Trajectory, make_grid
from invdyn.evaluation import split
from invdyn.models import DemandDriftSpec, InputNorm, make_model
from invdyn.training import loss, rollout

TINY = """\
[experiment]
regimes = AR1, Gaussian
splits = 0.6, 0.9
seeds = 0, 1
horizon = 6

[optimizer]
adam_iters = 5
bfgs_iters = 5
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def _one(out, pattern):
    found = sorted(out.glob(pattern))
    assert len(found) == 1, found
    return found[0]


def test_simulate_constant_when_noise_off(tmp_path, capsys):
    out = tmp_path / "sim"
    code = main(["simulate", "--regime", "Gaussian", "--seed", "0", "--set", "demand.sigma_gaussian=0",
                 "--out", str(out)])
    assert code == 0
    tr = Trajectory.from_csv(_one(out, "truth_Gaussian_seed0_*.csv"))
    assert np.all(tr.states == [100.0, 10.0, 10.0])
    assert "bullwhip=n/a" in capsys.readouterr().out


def test_simulate_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--regime", "AR1", "--seed", "3", "--out", str(tmp_path / name)]) == 0
    for pat in ("truth_*.csv", "demand_*.csv", "manifest_*.txt"):
        assert _one(tmp_path / "a", pat).read_bytes() == _one(tmp_path / "b", pat).read_bytes()


def test_simulate_ar1_variance(tmp_path):
    assert main(["simulate", "--regime", "AR1", "--seed", "0", "--out", str(tmp_path)]) == 0
    d = Trajectory.from_csv(_one(tmp_path, "truth_AR1_seed0_*.csv")).D
    assert np.var(d, ddof=1) == pytest.approx(14.0625, rel=0.25)


def test_train_checkpoint_round_trip(tmp_path, tiny_cfg):
    out = tmp_path / "nested" / "dir"
    assert main(["train", "--config", str(tiny_cfg), "--regime", "AR1", "--model", "NODE",
                 "--split", "0.6", "--seed", "1", "--out", str(out)]) == 0
    ckpt = _one(out, "NODE_AR1_p0.6_seed1_*.ckpt")
    report = _one(out, "NODE_AR1_p0.6_seed1_*.train.txt").read_text()
    model = load_model(ckpt)
    from invdyn.config import load_config
    from invdyn.evaluation import make_truth
    from invdyn.demand import Regime

    train_seg, _ = split(make_truth(load_config(tiny_cfg), Regime.AR1, 1), 0.6)
    final = float(report.splitlines()[0].split("=")[1])
    assert loss(model, train_seg) == final
    vals = np.loadtxt(_one(out, "NODE_AR1_p0.6_seed1_*.params.txt"))
    np.testing.assert_array_equal(vals, model.params.flat)


def test_train_recovers_structured_truth_from_csv(tmp_path):
    ude = make_model("UDE", InputNorm.identity(), 0, drift=DemandDriftSpec(2.0, 10.0))
    ude = ude.with_flat(np.zeros(ude.params.arch.n_params))
    data = rollout(ude, SystemState(80.0, 14.0, 12.0), make_grid(0, 30, 0.2))
    csv_path = tmp_path / "structured.csv"
    data.to_csv(csv_path)
    out = tmp_path / "out"
    assert main(["train", "--data", str(csv_path), "--regime", "AR1", "--model", "UDE",
                 "--split", "0.9", "--seed", "0", "--out", str(out)]) == 0
    report = _one(out, "UDE_AR1_p0.9_seed0_data*.train.txt").read_text()
    assert float(report.splitlines()[0].split("=")[1]) < 1e-6


def test_evaluate_byte_identical_and_summary(tmp_path, tiny_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["evaluate", "--config", str(tiny_cfg), "--out", str(a), "--jobs", "2"]) == 0
    assert main(["evaluate", "--config", str(tiny_cfg), "--out", str(b)]) == 0
    ra, rb = _one(a, "results_*.csv"), _one(b, "results_*.csv")
    assert ra.read_bytes() == rb.read_bytes()
    lines = ra.read_text().splitlines()
    assert len(lines) == 1 + 2 * 2 * 2 * 2
    # rows ordered by (regime, model, p, seed)
    keys = [tuple(line.split(",")[:4]) for line in lines[1:]]
    assert keys[0] == ("AR1", "NODE", "0.6", "0") and keys[-1] == ("Gaussian", "UDE", "0.9", "1")
    summary = _one(a, "summary_*.csv").read_text().splitlines()
    assert len(summary) == 1 + 4
    plots = sorted((a / ra.stem.replace("results", "plots")).glob("*.csv"))
    assert len(plots) == 16
    head = plots[0].read_text().splitlines()[0]
    assert head == "t,I_true,O_true,D_true,I_pred,O_pred,D_pred"
    # every artifact name carries the config hash
    tag = ra.stem.split("_")[1]
    assert all(tag in p.name for p in a.iterdir())


def test_report_command(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "ev"
    main(["evaluate", "--config", str(tiny_cfg), "--out", str(out), "--regime", "AR1", "--split", "0.9"])
    results = _one(out, "results_*.csv")
    before = results.read_bytes()
    assert main(["report", str(results)]) == 0
    md = _one(out, "*.report.md").read_text()
    assert "Headline orderings" in md and "AR1 p=0.9" in md
    assert results.read_bytes() == before


def test_report_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("nope\n")
    assert main(["report", str(bad)]) == 2
    assert main(["report", str(tmp_path / "missing.csv")]) == 2


def test_config_errors_exit_2(tmp_path):
    assert main(["simulate", "--set", "physics.bogus=1", "--out", str(tmp_path)]) == 2
    assert main(["train", "--model", "GRU", "--out", str(tmp_path)]) == 2
    assert main(["train", "--split", "1.5", "--out", str(tmp_path)]) == 2
    assert main(["evaluate", "--jobs", "0", "--out", str(tmp_path)]) == 2


def test_numerical_failure_exit_3(tmp_path, tiny_cfg):
    # a huge learning rate drives NODE training into blow-up territory
    code = main(["evaluate", "--config", str(tiny_cfg), "--regime", "AR1", "--model", "NODE", "--split", "0.9",
                 "--seed", "0", "--set", "optimizer.adam_lr=1e6", "--set", "optimizer.bfgs_iters=0",
                 "--out", str(tmp_path)])
    text = _one(tmp_path, "results_*.csv").read_text()
    flagged = any(f in text for f in ("train_penalty", "forecast_blowup", "adam_no_finite_loss"))
    assert code == (3 if flagged else 0)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "invdyn", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "evaluate" in proc.stdout
