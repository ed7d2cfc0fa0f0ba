from __future__ import annotations

import json
from pathlib import Path

import pandas as pd
import pytest

from cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, build_parser, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
VALLEY = str(CONFIGS / "valley.json")
SMALL_VALLEY = ["--set", "rho_grid=[0.1]", "--set", "swa_start_grid=[0.75]", "--set", "seeds=[0, 1]"]


@pytest.fixture
def diverging_config(tmp_path):
    path = tmp_path / "diverging.json"
    path.write_text(json.dumps({
        "model": "quadratic",
        "init": [1.0],
        "data": {"kind": "placeholder", "n": 1},
        "optimizer": {"base": "sgd", "lr": 1000.0, "epochs": 100, "batch_size": 1},
        "modes": ["baseline", "swa"],
        "seeds": [0],
    }))
    return str(path)


def test_parser_knows_every_command() -> None:
    parser = build_parser({"workers": 1, "output_dir": "runs", "log_level": "INFO"})
    for command in ("train", "sweep", "interpolate", "surface", "report"):
        extra = ["--checkpoint", "x.fltl"] if command == "surface" else []
        extra += ["--run-dir", "runs/x"] if command == "report" else []
        assert parser.parse_args([command, *extra]).command == command
    with pytest.raises(SystemExit):
        parser.parse_args(["plot"])


def test_train_writes_history(tmp_path) -> None:
    code = main(["train", "--config", str(CONFIGS / "moons.json"), "--out", str(tmp_path),
                 "--n", "40", "--noise", "0.2", "--set", "optimizer.epochs=2",
                 "--set", "optimizer.batch_size=8",
                 "--set", "optimizer.swa_start_frac=0.5", "--seed", "3"])
    assert code == EXIT_OK
    history = pd.read_csv(tmp_path / "history.csv")
    assert history["epoch"].max() == 1
    assert (tmp_path / "checkpoints" / "wasam_seed3.fltl").exists()


def test_sweep_report_interpolate_and_surface(tmp_path, capsys) -> None:
    run_dir = tmp_path / "valley"
    assert main(["sweep", "--config", VALLEY, "--out", str(run_dir), *SMALL_VALLEY]) == EXIT_OK
    printed = capsys.readouterr().out
    assert printed.splitlines()[0] == "loss (lower is better)"

    assert main(["report", "--run-dir", str(run_dir), "--excel"]) == EXIT_OK
    assert capsys.readouterr().out == printed
    assert (run_dir / "summary.xlsx").exists()

    assert main(["interpolate", "--config", VALLEY, "--run-dir", str(run_dir), "--seed", "1",
                 "--steps", "6"]) == EXIT_OK
    assert (run_dir / "interpolations" / "seed1" / "sam-wasam" / "interpolation.csv").exists()

    assert main(["surface", "--config", VALLEY, "--checkpoint",
                 str(run_dir / "checkpoints" / "sam_seed0.fltl"), "--out", str(tmp_path / "surface"),
                 "--steps", "3", "--normalization", "none"]) == EXIT_OK
    assert len(pd.read_csv(tmp_path / "surface" / "surface.csv")) == 3 * 3 * 2


def test_interpolate_between_two_files(tmp_path) -> None:
    assert main(["train", "--config", VALLEY, "--out", str(tmp_path)]) == EXIT_OK
    checkpoints = tmp_path / "checkpoints"
    code = main(["interpolate", "--config", VALLEY, "--a", str(checkpoints / "swa_seed0.fltl"),
                 "--b", str(checkpoints / "baseline_seed0.fltl"), "--out", str(tmp_path / "pair"),
                 "--alpha-range", "0", "1", "--steps", "5"])
    assert code == EXIT_OK
    grid = pd.read_csv(tmp_path / "pair" / "interpolation.csv")
    assert sorted(grid["alpha"].unique()) == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_divergence_exit_code(tmp_path, diverging_config) -> None:
    assert main(["train", "--config", diverging_config, "--out", str(tmp_path / "t")]) == EXIT_DIVERGED
    assert main(["sweep", "--config", diverging_config, "--out", str(tmp_path / "s")]) == EXIT_DIVERGED


@pytest.mark.parametrize(
    "argv",
    [
        ["train"],
        ["train", "--config", "no/such/config.json"],
        ["train", "--config", VALLEY, "--set", "optimizer.lr"],
        ["sweep", "--config", VALLEY, "--data", "mnist"],
        ["interpolate", "--config", VALLEY],
        ["report", "--run-dir", "no/such/run"],
    ],
)
def test_configuration_errors_exit_with_2(argv, tmp_path) -> None:
    assert main([*argv, "--out", str(tmp_path)] if argv[0] != "report" else argv) == EXIT_CONFIG
