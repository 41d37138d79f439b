import json
import subprocess
import sys

import pytest

from perforated.cli import DEFAULTS, EXPERIMENTS, ConfigError, ExperimentConfig, main, run

QUICK = {
    "sample": ["--lambda", "5", "--d", "2"],
    "cluster": [],
    "occupancy": ["--trials", "100", "--ladder", "0.125,0.0625,0.03125"],
    "separation": ["--trials", "100", "--ladder", "0.125,0.0625,0.03125"],
    "slln": ["--trials", "100", "--ladder", "0.125"],
    "john": ["--d", "2", "--samples", "10"],
    "bogovskii-sweep": ["--resolution", "128", "--ladder", "0.35,0.3", "--probes", "3", "--power-iters", "5", "--lambda", "0.3"],
    "cutoff-rate": ["--ladder", "0.3,0.25,0.2", "--lambda", "1"],
}


def test_every_experiment_has_a_quick_config():
    assert set(QUICK) == set(EXPERIMENTS) == set(DEFAULTS)


@pytest.mark.parametrize("name", EXPERIMENTS)
def test_runs_write_manifest(name, tmp_path):
    out = tmp_path / name
    code = main(["run", name, *QUICK[name], "--seed", "3", "--out", str(out)])
    manifest = json.loads((out / "manifest.json").read_text())
    assert code == (0 if manifest["passed"] else 1)
    assert manifest["config"]["experiment"] == name and manifest["config"]["seed"] == 3
    for artifact in manifest["artifacts"]:
        assert (out / artifact).exists()
    assert set(manifest) >= {"config", "version", "wall_time_s", "artifacts", "invariants", "errors", "passed"}


def test_cluster_defaults_fail_invariants(tmp_path):
    # at eps = 0.05 the cover ball exceeds the clearance threshold
    assert main(["run", "cluster", "--seed", "7", "--out", str(tmp_path)]) == 1
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert not manifest["passed"] and (tmp_path / "report.csv").exists()


@pytest.mark.parametrize(
    "argv",
    [
        ["occupancy", "--trials", "5"],
        ["separation", "--kappa", "1.0"],
        ["cutoff-rate", "--r", "3.5"],
        ["sample", "--eps", "-0.1"],
        ["slln", "--seed", "-1"],
        ["nonsense"],
        ["john", "--bogus", "1"],
    ],
)
def test_bad_config_exits_2_without_artifacts(argv, tmp_path):
    out = tmp_path / "out"
    assert main(["run", *argv, "--out", str(out)]) == 2
    assert not out.exists()


def test_config_file_round_trip(tmp_path):
    cfg = ExperimentConfig("separation", {"trials": 100, "ladder": [0.125, 0.0625, 0.03125]}, seed=11, output_dir=str(tmp_path / "a"))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert main(["run", "separation", "--config", str(path)]) == 0
    echoed = json.loads((tmp_path / "a" / "manifest.json").read_text())["config"]
    again = ExperimentConfig.from_dict(echoed)
    again.validate()
    assert again.to_dict() == echoed
    assert echoed["params"]["kappa"] == DEFAULTS["separation"]["kappa"]


def test_flags_override_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"experiment": "slln", "params": {"trials": 100, "ladder": [0.25]}, "seed": 1}))
    assert main(["run", "slln", "--config", str(path), "--seed", "5", "--trials", "120", "--out", str(tmp_path / "o")]) == 0
    cfg = json.loads((tmp_path / "o" / "manifest.json").read_text())["config"]
    assert cfg["seed"] == 5 and cfg["params"]["trials"] == 120


def test_config_experiment_mismatch(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"experiment": "slln"}))
    assert main(["run", "john", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "slln", "colour": 1})
    cfg = ExperimentConfig("slln", {"colour": 1})
    assert run(cfg) == 2


def test_rerun_is_byte_identical(tmp_path):
    args = ["run", "occupancy", *QUICK["occupancy"], "--seed", "42"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    assert (tmp_path / "a" / "occupancy.csv").read_bytes() == (tmp_path / "b" / "occupancy.csv").read_bytes()


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "perforated.cli", "run", "sample", "--lambda", "2", "--d", "2", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "sample: PASS" in proc.stdout
