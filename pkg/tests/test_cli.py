"""Command-line pipelines: schema gate, exit codes, artifacts, determinism."""

import json
import os

import pytest

from mfglab import cli


def write_config(tmp_path, name, cfg):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def sim_config(**over):
    cfg = {"command": "simulate",
           "grid": {"n": 1, "L": 1.0, "N": 32, "T": 0.5, "K": 6},
           "seed": 1,
           "simulate": {"snapshot_times": [0.5]}}
    cfg.update(over)
    return cfg


def run_cli(cmd, config_path, outdir):
    return cli.main([cmd, "--config", config_path, "--output-dir",
                     str(outdir)])


def manifest(outdir):
    with open(os.path.join(str(outdir), "run_manifest.json")) as fh:
        return json.load(fh)


# -- schema gate ---------------------------------------------------------------

def test_unknown_key_rejected(tmp_path):
    path = write_config(tmp_path, "c.json", sim_config(bogus=1))
    assert run_cli("simulate", path, tmp_path / "out") == cli.EXIT_SCHEMA


def test_malformed_json_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    assert run_cli("simulate", str(path), tmp_path / "out") == cli.EXIT_SCHEMA


def test_command_mismatch_rejected(tmp_path):
    path = write_config(tmp_path, "c.json", sim_config())
    assert run_cli("selftest", path, tmp_path / "out") == cli.EXIT_SCHEMA


def test_missing_required_field_rejected(tmp_path):
    cfg = sim_config()
    del cfg["seed"]
    path = write_config(tmp_path, "c.json", cfg)
    assert run_cli("simulate", path, tmp_path / "out") == cli.EXIT_SCHEMA


def test_capacity_guard_exit_code(tmp_path):
    cfg = sim_config(grid={"n": 1, "L": 1.0, "N": 64, "T": 0.5, "K": 30},
                     tree={"recombining": False})
    path = write_config(tmp_path, "c.json", cfg)
    assert run_cli("simulate", path, tmp_path / "out") == cli.EXIT_CAPACITY


# -- pipelines -----------------------------------------------------------------

def test_selftest_pipeline(tmp_path):
    cfg = {"command": "selftest",
           "grid": {"n": 1, "L": 1.0, "N": 32, "T": 0.5, "K": 8}, "seed": 0}
    path = write_config(tmp_path, "c.json", cfg)
    out = tmp_path / "out"
    assert run_cli("selftest", path, out) == 0
    m = manifest(out)
    assert m["passed"] and m["failure"] is None
    assert (out / "selftest.json").exists()


def test_simulate_pipeline_artifacts(tmp_path):
    path = write_config(tmp_path, "c.json", sim_config())
    out = tmp_path / "out"
    assert run_cli("simulate", path, out) == 0
    m = manifest(out)
    assert m["passed"]
    assert m["summary"]["mass_drift"] < 1e-8
    assert m["summary"]["converged"]
    # one density snapshot per terminal-slice node (K=6, non-recombining off)
    flds = [f for f in m["files"] if f.endswith(".fld")]
    assert len(flds) == 7
    for f in m["files"]:
        assert (out / f).exists()
        assert m["checksums"][f] == cli.file_checksum(str(out / f))


def test_numerical_failure_still_writes_manifest(tmp_path):
    cfg = sim_config(simulate={"max_iters": 1, "tol": 1e-13})
    path = write_config(tmp_path, "c.json", cfg)
    out = tmp_path / "out"
    assert run_cli("simulate", path, out) == cli.EXIT_NUMERICAL
    m = manifest(out)
    assert not m["passed"]
    assert "residual" in m["failure"]


def test_carleman_pipeline(tmp_path):
    cfg = {"command": "verify-carleman",
           "grid": {"n": 1, "L": 1.0, "N": 64, "T": 1.0, "K": 12}, "seed": 2,
           "carleman": {"theorem": "th1", "betas": [0.0, 1.0],
                        "log10_lambdas": [0.0, 0.3], "mus": [2.0],
                        "n_data": 2}}
    path = write_config(tmp_path, "c.json", cfg)
    out = tmp_path / "out"
    assert run_cli("verify-carleman", path, out) == 0
    m = manifest(out)
    assert m["summary"]["n_satisfied"] == m["summary"]["n_reports"] == 4
    with open(out / "carleman_reports.csv") as fh:
        header = fh.readline().strip().split(",")
    assert header[:4] == ["theorem", "log_lambda", "mu", "beta"]
    assert (out / "plot_carleman.csv").exists()


def test_stability_pipeline(tmp_path):
    cfg = {"command": "stability-twin",
           "grid": {"n": 1, "L": 1.0, "N": 32, "T": 0.5, "K": 6}, "seed": 3,
           "tree": {"recombining": False},
           "stability": {"kind": "lipschitz", "deltas": [0.01, 0.001],
                         "n_shapes": 1}}
    path = write_config(tmp_path, "c.json", cfg)
    out = tmp_path / "out"
    assert run_cli("stability-twin", path, out) == 0
    m = manifest(out)
    assert m["summary"]["fitted_C"] > 0.0
    assert (out / "stability_rows.csv").exists()


def test_determinism_across_runs_and_worker_counts(tmp_path, monkeypatch):
    path = write_config(tmp_path, "c.json", sim_config())
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("simulate", path, a) == 0
    monkeypatch.setenv("MFG_LAB_THREADS", "4")
    assert run_cli("simulate", path, b) == 0
    ma, mb = manifest(a), manifest(b)
    assert ma["checksums"] == mb["checksums"]
    assert len(ma["checksums"]) > 0
    assert mb["threads"] == "4"


def test_seed_override_changes_nothing_but_seed(tmp_path):
    path = write_config(tmp_path, "c.json", sim_config())
    out = tmp_path / "out"
    rc = cli.main(["simulate", "--config", path, "--output-dir", str(out),
                   "--seed", "7"])
    assert rc == 0
    assert manifest(out)["config"]["seed"] == 7
