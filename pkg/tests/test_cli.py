import json
import subprocess
import sys

import pytest

from mftransfer import analysis, cli, trainer
from mftransfer.measures import save_dataset
from mftransfer.tasks import TaskSpec, gen_task

import numpy as np

TINY = {"n_grid": [8, 16], "replicates": 2, "test_size": 10000,
        "train": {"particles": 16, "steps": 20, "step_size": 0.02},
        "scenarios": [{"name": "supervised"}, {"name": "alpha_erm"},
                      {"name": "finetune", "n_s_rule": {"kind": "fixed", "n_s": 16},
                       "train": {"stage2_steps": 10, "stage2_step_size": 0.5}}]}


def _write(tmp_path, obj, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def test_bad_config_exits_2(tmp_path, capsys):
    code = cli.main(["rate-sweep", "--config", _write(tmp_path, {"n_grid": [4, 2]}), "--out", str(tmp_path)])
    assert code == cli.EXIT_CONFIG
    assert "n_grid" in capsys.readouterr().err


def test_unreadable_config_exits_2(tmp_path):
    assert cli.main(["bounds", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert cli.main(["bounds", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_bad_threads_env_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("THREADS", "lots")
    assert cli.main(["rate-sweep", "--config", _write(tmp_path, TINY), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_train_writes_model_trace_and_config(tmp_path):
    cfg = {"task": {"q": 2}, "n_t": 16, "train": {"scenario": "supervised", "particles": 8, "steps": 5, "beta": 5.0}}
    out = tmp_path / "run"
    assert cli.main(["train", "--config", _write(tmp_path, cfg), "--out", str(out), "--seed", "4"]) == 0
    model = trainer.load_model(out / "model.jsonl")
    assert model.cloud.atoms.shape == (8, 3)
    assert (out / "trace.csv").read_text().count("\n") >= 2
    saved = json.loads((out / "config.json").read_text())
    assert saved["train"]["seed"] == 4 and saved["n_t"] == 16


def test_train_unknown_key_exits_2(tmp_path):
    assert cli.main(["train", "--config", _write(tmp_path, {"epochs": 3}), "--out", str(tmp_path)]) == 2


def test_train_divergence_exits_3(tmp_path):
    cfg = {"n_t": 16, "train": {"scenario": "supervised", "particles": 8, "steps": 50, "beta": 0.05,
                                "step_size": 5.0}}
    assert cli.main(["train", "--config", _write(tmp_path, cfg), "--out", str(tmp_path / "x")]) == cli.EXIT_DIVERGED


def test_rate_sweep_outputs_identical_across_threads(tmp_path, capsys):
    cfg = _write(tmp_path, TINY)
    assert cli.main(["rate-sweep", "--config", cfg, "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert cli.main(["rate-sweep", "--config", cfg, "--out", str(tmp_path / "b"), "--threads", "3"]) == 0
    a = (tmp_path / "a" / "rates.csv").read_bytes()
    assert a == (tmp_path / "b" / "rates.csv").read_bytes()
    assert "insufficient data" in capsys.readouterr().out


def test_bounds_json_reevaluates(tmp_path):
    cfg = {**TINY, "n_grid": [32, 64]}
    assert cli.main(["bounds", "--config", _write(tmp_path, cfg), "--out", str(tmp_path)]) == 0
    payload = json.loads((tmp_path / "bounds.json").read_text())
    assert payload["master_seed"] == 0
    assert len(payload["reports"]) == 6
    for rep in payload["reports"]:
        again = analysis.FORMULAS[rep["formula"]](rep["constants"])
        assert again == pytest.approx(rep["rhs_value"], rel=1e-12)
        assert set(rep["notes"]) >= {"L_m", "L_e"}


def test_bounds_need_poly10_prior(tmp_path):
    cfg = {**TINY, "prior": {"potential": "gaussian", "sigma": 1.0}}
    assert cli.main(["bounds", "--config", _write(tmp_path, cfg)]) == cli.EXIT_CONFIG


def test_similarity_from_task_and_files(tmp_path, capsys):
    cfg = _write(tmp_path, {"task": {"mode": "shifted_input", "shift": 1.0}, "n": 1000})
    assert cli.main(["similarity", "--config", cfg, "--out", str(tmp_path)]) == 0
    far = json.loads((tmp_path / "similarity.json").read_text())["ipm_lower_bound"]
    task = gen_task(TaskSpec(), 0)
    a = task.source.draw(500, np.random.default_rng(0))
    save_dataset(a, tmp_path / "a.jsonl")
    capsys.readouterr()
    assert cli.main(["similarity", "--data-a", str(tmp_path / "a.jsonl"), "--data-b", str(tmp_path / "a.jsonl")]) == 0
    same = json.loads(capsys.readouterr().out)["ipm_lower_bound"]
    assert same == 0.0
    assert far > 0.5


def test_verify_fast_passes(tmp_path):
    assert cli.main(["verify", "--fast", "--out", str(tmp_path)]) == cli.EXIT_OK
    checks = json.loads((tmp_path / "verify.json").read_text())
    assert checks and all(c["passed"] for c in checks)


def test_module_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "mftransfer", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "rate-sweep", "bounds", "similarity", "verify"):
        assert cmd in proc.stdout


CONFIG_DIR = __import__("pathlib").Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("name", ["sweep_default", "sweep_supervised", "sweep_alpha_erm", "sweep_finetune",
                                  "sweep_dissimilar"])
def test_example_sweep_configs_parse(name):
    from mftransfer import harness
    cfg = harness.load_experiment(CONFIG_DIR / f"{name}.json")
    assert cfg.n_grid == (32, 64, 128, 256)
    assert harness.task_regime(cfg.task) == ("dissimilar" if name == "sweep_dissimilar" else "similar")


@pytest.mark.parametrize("scenario", ["supervised", "alpha_erm", "finetune"])
def test_example_train_configs_parse(scenario):
    d = json.loads((CONFIG_DIR / f"train_{scenario}.json").read_text())
    assert set(d) <= cli._TRAIN_KEYS
    assert trainer.TrainConfig.from_dict(d["train"]).scenario == scenario


def test_output_defaults_are_per_command():
    parser = cli.build_parser()
    assert parser.parse_args(["similarity"]).out is None
    assert parser.parse_args(["bounds"]).out is None
    assert parser.parse_args(["rate-sweep", "--out", "x"]).out == "x"
