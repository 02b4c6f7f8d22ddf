import csv
import json

import numpy as np
import yaml

from predsls import cli


def run(tmp_path, *args):
    return cli.main([*args, "-o", str(tmp_path)])


def test_synthesize_writes_masked_clm_and_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "synthesize", "--preset", "chain:6", "--T", "8", "--kappa", "1") == 0
    assert run(b, "synthesize", "--preset", "chain:6", "--T", "8", "--kappa", "1") == 0
    assert (a / "clm.csv").read_bytes() == (b / "clm.csv").read_bytes()
    with open(a / "clm.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and set(rows[0]) == {"i", "j", "t", "k", "kind", "value"}
    for r in rows:
        i, j = int(r["i"]), int(r["j"])
        limit = 1 if r["kind"] in ("x", "xhat") else 2
        assert abs(i - j) <= limit
        assert float(r["value"]) != 0.0
    log = (a / "synthesis.log").read_text()
    assert "residual_causal" in log and "node 6" in log
    assert yaml.safe_load((a / "config.yaml").read_text())["kappa"] == 1


def test_kappa_is_clamped_with_warning(tmp_path, caplog):
    assert run(tmp_path, "synthesize", "--preset", "chain:4", "--T", "4", "--kappa", "99") == 0
    assert "clamped to 3" in caplog.text
    assert (tmp_path / "synthesis.log").read_text().startswith("kappa 3")


def test_dump_gains(tmp_path):
    assert run(tmp_path, "synthesize", "--preset", "chain:3", "--T", "3", "--kappa", "0", "--dump-gains") == 0
    assert sorted(p.name for p in tmp_path.glob("gains_node*.csv")) == [
        "gains_node1.csv", "gains_node2.csv", "gains_node3.csv"]


def test_empty_controller_list_is_usage_error(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("controllers: []\nsystem: {preset: 'chain:3', T: 4}\n")
    assert cli.main(["compare", "--config", str(cfg), "-o", str(tmp_path / "o")]) == 2


def test_config_errors_exit_2(tmp_path):
    assert cli.main(["compare", "--config", str(tmp_path / "missing.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense_key: 1\n")
    assert cli.main(["synthesize", "--config", str(bad)]) == 2
    assert run(tmp_path, "synthesize", "--preset", "chain:3", "--T", "0") == 2
    assert run(tmp_path, "synthesize", "--preset", "chain:3", "--kappa", "-1") == 2
    assert cli.main(["no-such-command"]) == 2
    assert cli.main(["compare", "--controller", "lqr", "-o", str(tmp_path)]) == 2


def test_fir_horizon_other_than_T_is_rejected(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("system: {preset: 'chain:3', T: 4}\nfir_horizon: 2\n")
    assert cli.main(["synthesize", "--config", str(cfg), "-o", str(tmp_path / "o")]) == 2


def _matrix_config(tmp_path, B):
    np.savetxt(tmp_path / "A.csv", 0.5 * np.eye(3) + 0.1 * (np.abs(np.subtract.outer(range(3), range(3))) == 1),
               delimiter=",")
    np.savetxt(tmp_path / "B.csv", B, delimiter=",")
    np.savetxt(tmp_path / "I.csv", np.eye(3), delimiter=",")
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"system": {"preset": None, "topology": "chain:3", "T": 4, "A": "A.csv",
                                              "B": "B.csv", "Q": "I.csv", "R": "I.csv"}, "kappa": 0}))
    return cfg


def test_matrix_input_and_numerical_failure(tmp_path):
    good = _matrix_config(tmp_path, np.eye(3))
    assert cli.main(["synthesize", "--config", str(good), "-o", str(tmp_path / "ok")]) == 0
    bad = _matrix_config(tmp_path, np.diag([1.0, 0.0, 1.0]))
    assert cli.main(["synthesize", "--config", str(bad), "-o", str(tmp_path / "bad")]) == 3


def test_structural_violation_fails_validation(tmp_path):
    cfg = _matrix_config(tmp_path, np.eye(3))
    A = np.loadtxt(tmp_path / "A.csv", delimiter=",")
    A[0, 2] = 0.2
    np.savetxt(tmp_path / "A.csv", A, delimiter=",")
    assert cli.main(["synthesize", "--config", str(cfg), "-o", str(tmp_path / "o")]) == 2


def test_compare_outputs(tmp_path):
    code = run(tmp_path, "compare", "--preset", "chain:5", "--T", "8", "--seeds", "3",
               "--controller", "predsls:k=1", "--controller", "tc:k=1", "--error-levels", "0", "0.5")
    assert code == 0
    with open(tmp_path / "regret.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2 * 2 * 3
    with open(tmp_path / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    svg = (tmp_path / "compare.svg").read_text()
    assert "<!-- config sha256" in svg


def test_simulate_outputs(tmp_path):
    assert run(tmp_path, "simulate", "--preset", "chain:4", "--T", "6", "--controller", "predsls:k=1,agent",
               "--controller", "cc") == 0
    assert {p.name for p in tmp_path.glob("trajectory_*.csv")} == {"trajectory_PredSLS_k1.csv", "trajectory_CC.csv"}


def test_decay_outputs_four_heatmaps(tmp_path):
    out = tmp_path / "new" / "dir"
    assert run(out, "decay", "--preset", "chain:6", "--T", "8", "--kappa", "5", "--kappas", "0", "1", "2") == 0
    for kind in ("x", "xhat", "u", "uhat"):
        grid = np.loadtxt(out / f"heatmap_{kind}.csv", delimiter=",", skiprows=1)[:, 1:]
        assert grid.shape == (9, 9)
    report = json.loads((out / "decay_report.json").read_text())
    assert 0 < report["temporal"]["fitted_rho"] < 1
    assert "spatial" in report


def test_sweep_and_codesign(tmp_path):
    assert run(tmp_path / "s", "sweep", "--preset", "chain:4", "--T", "6", "--kappas", "0", "1", "3",
               "--seeds", "2", "--error-levels", "0") == 0
    assert (tmp_path / "s" / "sweep.svg").exists()
    assert run(tmp_path / "c", "codesign", "--preset", "chain:4", "--T", "6", "--kappas", "0", "1", "2", "3",
               "--seeds", "2", "--error-levels", "0") == 0
    with open(tmp_path / "c" / "codesign.csv") as fh:
        row = next(csv.DictReader(fh))
    assert row["empirical_kappa_star"] == row["bound_kappa_star"] == "3"


def test_codesign_single_node(tmp_path):
    assert run(tmp_path, "codesign", "--preset", "chain:1", "--T", "4", "--seeds", "2") == 0
    with open(tmp_path / "codesign.csv") as fh:
        row = next(csv.DictReader(fh))
    assert row["empirical_kappa_star"] == row["bound_kappa_star"] == "0"


def test_svg_is_reproducible(tmp_path):
    args = ["sweep", "--preset", "chain:3", "--T", "4", "--kappas", "0", "2", "--seeds", "2"]
    assert run(tmp_path / "a", *args) == 0
    assert run(tmp_path / "b", *args) == 0
    assert (tmp_path / "a" / "sweep.svg").read_bytes() == (tmp_path / "b" / "sweep.svg").read_bytes()
