import json
import logging

import pandas as pd
import pytest

from config.settings import ConfigError
from core.evaluation import EVAL_FILE
from core.grid import RUNS_DIR
from main import EXIT_CONFIG, EXIT_IO, EXIT_OK, RunSpec, main

TINY_CONFIG = {
    "datagen": {"d_in": 8, "per_class_source": 6, "per_class_target": 8},
    "split": {"n_train_target": 30, "n_val_target": 15},
    "train": {"epochs": 1, "d_feat": 4, "hidden_dims": [8]},
    "grid": {"seeds": [0], "lambdas": [0.5, 2.0]},
}


@pytest.fixture(autouse=True)
def reset_root_logger():
    yield
    root = logging.getLogger()
    for handler in root.handlers[:]:
        root.removeHandler(handler)
        handler.close()


@pytest.fixture
def tiny(tmp_path):
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
    out = tmp_path / "out"
    return ["--config", str(config), "--out", str(out)], out


def test_gen_default_counts(tmp_path, capsys):
    assert main(["--out", str(tmp_path), "gen"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "source: 1200, target: 600" in out
    assert "train_target: 150, val_target: 30, test_target: 420" in out
    assert (tmp_path / "dataset.csv").exists()


def test_print_config(capsys):
    assert main(["--preset", "full", "--print-config"]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed["train"]["lr"] == 0.0001


def test_missing_command_is_config_error():
    assert main([]) == EXIT_CONFIG


def test_malformed_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    assert main(["--config", str(bad), "--out", str(tmp_path), "gen"]) == EXIT_CONFIG
    assert main(["--config", str(bad), "--print-config"]) == EXIT_CONFIG


def test_unknown_config_key(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epoch": 3}}), encoding="utf-8")
    assert main(["--config", str(bad), "--out", str(tmp_path), "train"]) == EXIT_CONFIG


def test_missing_dataset_is_io_error(tmp_path):
    assert main(["--out", str(tmp_path), "--seeds", "0", "train"]) == EXIT_IO


def test_zero_lambda_sweep_is_config_error(tmp_path):
    assert main(["--out", str(tmp_path), "--lambdas", "0", "sweep"]) == EXIT_CONFIG


def test_eval_requires_run_dir(tmp_path):
    assert main(["--out", str(tmp_path), "eval"]) == EXIT_CONFIG


def test_eval_missing_checkpoint_is_io_error(tmp_path):
    assert main(["--out", str(tmp_path), "--run-dir", str(tmp_path / "nowhere"), "eval"]) == EXIT_IO


def test_infeasible_split_is_config_error(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({**TINY_CONFIG, "split": {"n_train_target": 200, "n_val_target": 0}}), encoding="utf-8")
    assert main(["--config", str(config), "--out", str(tmp_path), "gen"]) == EXIT_CONFIG


def test_run_spec_validation():
    assert RunSpec(command="report").validate()
    with pytest.raises(ConfigError):
        RunSpec(command="train", seed_list=[]).validate()
    with pytest.raises(ConfigError):
        RunSpec(command="sweep", seed_list=[0], jobs=0).validate()


def test_train_eval_report_flow(tiny, capsys):
    flags, out = tiny
    assert main([*flags, "gen"]) == EXIT_OK
    assert main([*flags, "--seeds", "0,1", "train"]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "ours (da=True) 2 seeds" in printed

    run_dirs = sorted((out / RUNS_DIR).iterdir())
    assert [d.name for d in run_dirs] == ["train-ours-da1-lam1-s0", "train-ours-da1-lam1-s1"]
    first_eval = (run_dirs[0] / EVAL_FILE).read_bytes()

    assert main([*flags, "--run-dir", str(run_dirs[0]), "eval"]) == EXIT_OK
    assert "top1:" in capsys.readouterr().out
    assert (run_dirs[0] / EVAL_FILE).exists()
    assert (run_dirs[0] / "features_2d.csv").exists()
    assert json.loads((run_dirs[0] / EVAL_FILE).read_bytes())["top1"] == json.loads(first_eval)["top1"]

    assert main([*flags, "report"]) == EXIT_OK
    main_table = pd.read_csv(out / "table_main.csv")
    assert main_table["method"].tolist() == ["ours"]
    assert main_table["n_seeds"].tolist() == [2]
    assert len(pd.read_csv(out / "features_2d.csv")) > 0


def test_train_without_domain_adaptation(tiny, capsys):
    flags, out = tiny
    assert main([*flags, "gen"]) == EXIT_OK
    assert main([*flags, "--variant", "baseline", "--no-use-da", "train"]) == EXIT_OK
    assert "baseline (da=False) seed 0" in capsys.readouterr().out
    assert (out / RUNS_DIR / "train-baseline-da0-lam1-s0" / EVAL_FILE).exists()


def test_ablate_and_sweep(tiny, capsys):
    flags, out = tiny
    assert main([*flags, "gen"]) == EXIT_OK

    assert main([*flags, "ablate"]) == EXIT_OK
    ablation = pd.read_csv(out / "table_ablation.csv")
    assert ablation["variant"].tolist() == ["baseline", "baseline_w_coarse", "baseline_w_middle", "ours"]

    assert main([*flags, "sweep"]) == EXIT_OK
    sweep = pd.read_csv(out / "lambda_sweep.csv")
    assert sweep["lambda"].tolist() == [0.5, 2.0]
    assert sweep["n_seeds"].tolist() == [1, 1]
