from __future__ import annotations

import math
from pathlib import Path

import pandas as pd
import pytest

from autodiff import RngStream
from config import load_config, parse_config
from errors import LayoutMismatchError, ResultsError
from harness import (
    SUMMARY_COLUMNS,
    Job,
    JobResult,
    aggregate,
    best_flags,
    grid_jobs,
    interpolate_checkpoints,
    interpolate_run,
    read_results,
    report,
    run_experiment,
    select_settings,
    standard_error,
    surface_checkpoint,
    train_modes,
)
from landscape import GRID_COLUMNS
from models import build_model
from utils.data_utils import save_checkpoint, write_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def small_config():
    return parse_config({
        "model": "mlp[2-4-2]",
        "data": {"kind": "two-moons", "n": 40, "noise": 0.1, "seed": 0},
        "optimizer": {"base": "sgd", "lr": 0.1, "epochs": 4, "batch_size": 8, "rho": 0.05},
        "seeds": [0, 1],
        "rho_grid": [0.05],
        "swa_start_grid": [0.5],
    })


def test_standard_error() -> None:
    assert standard_error([0.1, 0.2, 0.3]) == pytest.approx(0.057735, abs=1e-6)
    assert standard_error([0.4]) == 0.0


def test_best_flags_use_the_standard_error_band() -> None:
    assert best_flags([0.90, 0.915], [0.02, 0.01]) == [True, True]
    assert best_flags([0.85, 0.915], [0.02, 0.01]) == [False, True]
    assert best_flags([0.30, 0.25], [0.01, 0.01], higher_is_better=False) == [False, True]


def test_grid_jobs_cover_every_grid_point() -> None:
    config = parse_config({"model": "mlp[2-4-2]", "seeds": [0, 1], "rho_grid": [0.05, 0.1],
                           "swa_start_grid": [0.5, 0.75]})
    jobs = grid_jobs(config)
    assert len(jobs) == 2 * (1 + 2 + 2 + 4)
    assert jobs[0] == Job("baseline", 0)
    assert Job("wasam", 1, rho=0.1, swa_start_frac=0.75) in jobs


def test_select_settings_maximizes_the_mean_validation_metric() -> None:
    results = [
        JobResult(Job("sam", 0, rho=0.05), 0.3, 0.80, False, 10),
        JobResult(Job("sam", 1, rho=0.05), 0.3, 0.90, False, 10),
        JobResult(Job("sam", 0, rho=0.1), 0.3, 0.88, False, 10),
        JobResult(Job("sam", 1, rho=0.1), 0.3, 0.86, False, 10),
        JobResult(Job("sam", 0, rho=0.2), math.nan, math.nan, True, 10),
    ]
    assert select_settings(results) == {"sam": (0.1, None)}


def test_select_settings_minimizes_loss_without_a_metric() -> None:
    results = [
        JobResult(Job("swa", 0, swa_start_frac=0.5), 0.2, math.nan, False, 1),
        JobResult(Job("swa", 0, swa_start_frac=0.9), 0.1, math.nan, False, 1),
    ]
    assert select_settings(results) == {"swa": (None, 0.9)}


def test_aggregate(results_frame) -> None:
    table = aggregate(results_frame)
    assert list(table.frame.columns) == SUMMARY_COLUMNS
    assert table.modes == ["baseline", "swa", "sam", "wasam"]
    assert table.value == "metric" and table.higher_is_better
    swa = table.row("swa")
    assert swa["mean"] == pytest.approx(0.90)
    assert swa["delta"] == pytest.approx(0.05)
    assert swa["stderr"] == pytest.approx(0.05)
    assert swa["n_seeds"] == 2
    assert table.row("sam")["stderr"] == 0.0
    assert table.non_degradation()
    with pytest.raises(ResultsError):
        table.row("lookahead")


def test_aggregate_excludes_diverged_runs(results_frame) -> None:
    frame = results_frame
    frame.loc[(frame["mode"] == "sam") & (frame["seed"] == 0), "diverged"] = 1
    frame.loc[(frame["mode"] == "sam") & (frame["seed"] == 0), ["metric", "loss"]] = math.nan
    row = aggregate(frame).row("sam")
    assert row["n_seeds"] == 1 and row["n_diverged"] == 1
    assert row["mean"] == pytest.approx(0.90)


def test_aggregate_falls_back_to_loss(results_frame) -> None:
    frame = results_frame
    frame["metric"] = math.nan
    table = aggregate(frame)
    assert table.value == "loss" and not table.higher_is_better
    assert table.row("baseline")["mean"] == pytest.approx(0.15)


def test_text_and_excel_exports(results_frame) -> None:
    table = aggregate(results_frame)
    text = table.to_text()
    assert text.splitlines()[0] == "metric (higher is better)"
    assert "+0.0500 ± 0.0500" in text
    assert "non-degradation (wasam >= min(swa, sam)): 1/1" in text
    assert table.to_excel()[:2] == b"PK"


def test_report_is_byte_identical(tmp_path, results_frame) -> None:
    write_csv(results_frame, tmp_path / "results.csv")
    report(tmp_path, excel=True)
    first = {name: (tmp_path / name).read_bytes() for name in ("summary.csv", "table.txt")}
    report(tmp_path)
    assert {name: (tmp_path / name).read_bytes() for name in first} == first
    assert (tmp_path / "summary.xlsx").exists()


def test_excel_summary_reads_back(tmp_path, results_frame) -> None:
    write_csv(results_frame, tmp_path / "results.csv")
    table = report(tmp_path, excel=True)
    sheet = pd.read_excel(tmp_path / "summary.xlsx", sheet_name="summary", engine="openpyxl")
    assert list(sheet.columns) == SUMMARY_COLUMNS
    assert sheet["mode"].tolist() == table.modes
    assert sheet["mean"].tolist() == pytest.approx(table.frame["mean"].tolist())


def test_read_results_rejects_foreign_files(tmp_path) -> None:
    with pytest.raises(ResultsError):
        read_results(tmp_path)
    (tmp_path / "results.csv").write_text("mode,score\nsam,1\n")
    with pytest.raises(ResultsError):
        read_results(tmp_path)


def _outputs(run_dir):
    files = sorted(p for p in Path(run_dir).rglob("*") if p.is_file())
    return {str(p.relative_to(run_dir)): p.read_bytes() for p in files}


class TestSweep:
    def test_small_sweep(self, tmp_path, small_config) -> None:
        result = run_experiment(small_config, out_dir=tmp_path / "run")
        assert result.total_runs == 8 and result.diverged_runs == 0
        assert not result.all_diverged
        frame = read_results(tmp_path / "run")
        assert (frame["split"] == "val").sum() == 8
        assert (frame["split"] == "test").sum() == 8
        assert result.table.modes == ["baseline", "swa", "sam", "wasam"]
        assert sorted(result.checkpoints) == [(mode, seed) for mode in ("baseline", "sam", "swa", "wasam")
                                              for seed in (0, 1)]
        for name in ("config.json", "results.csv", "summary.csv", "table.txt",
                     "checkpoints/wasam_seed1.fltl"):
            assert (tmp_path / "run" / name).exists()

    def test_reruns_and_workers_reproduce_every_file(self, tmp_path, small_config) -> None:
        run_experiment(small_config, out_dir=tmp_path / "a")
        run_experiment(small_config, out_dir=tmp_path / "b")
        run_experiment(small_config, out_dir=tmp_path / "c", workers=2)
        reference = _outputs(tmp_path / "a")
        assert _outputs(tmp_path / "b") == reference
        assert _outputs(tmp_path / "c") == reference

    def test_interpolate_run_writes_the_standard_pairs(self, tmp_path, small_config) -> None:
        run_experiment(small_config, out_dir=tmp_path / "run")
        outcomes = interpolate_run(small_config, tmp_path / "run", seed=0, steps=6)
        assert sorted(outcomes) == ["baseline-sam", "baseline-swa", "sam-wasam"]
        seed_dir = tmp_path / "run" / "interpolations" / "seed0"
        grid = pd.read_csv(seed_dir / "baseline-swa" / "interpolation.csv")
        assert list(grid.columns) == GRID_COLUMNS
        assert (seed_dir / "sam-wasam" / "barrier.csv").exists()
        assert (seed_dir / "sam-wasam" / "profile_summary.csv").exists()
        assert len(pd.read_csv(seed_dir / "distances.csv")) == 3
        with pytest.raises(ResultsError):
            interpolate_run(small_config, tmp_path / "run", seed=9)

    def test_all_diverged(self, tmp_path) -> None:
        config = parse_config({
            "model": "quadratic", "init": [1.0],
            "data": {"kind": "placeholder", "n": 1},
            "optimizer": {"lr": 1e3, "epochs": 100, "batch_size": 1},
            "modes": ["baseline"], "seeds": [0],
        })
        result = run_experiment(config, out_dir=tmp_path)
        assert result.all_diverged
        assert result.table is None


def test_train_modes_writes_history_and_checkpoints(tmp_path, small_config) -> None:
    outcomes = train_modes(small_config, seed=1, out_dir=tmp_path)
    assert sorted(outcomes) == ["baseline", "sam", "swa", "wasam"]
    history = pd.read_csv(tmp_path / "history.csv")
    assert list(history.columns) == ["epoch", "mode", "split", "loss", "metric", "averaged"]
    assert set(history.loc[history["averaged"] == 1, "mode"]) == {"swa", "wasam"}
    assert (tmp_path / "checkpoints" / "sam_seed1.fltl").exists()


def test_checkpoint_analyses(tmp_path, small_config) -> None:
    train_modes(small_config, seed=0, out_dir=tmp_path)
    checkpoints = tmp_path / "checkpoints"
    interpolate_checkpoints(small_config, checkpoints / "sam_seed0.fltl",
                            checkpoints / "baseline_seed0.fltl", tmp_path / "pair", steps=6)
    distances = pd.read_csv(tmp_path / "pair" / "distances.csv")
    assert distances["pair"].tolist() == ["sam_seed0-baseline_seed0"]

    grid = surface_checkpoint(small_config, checkpoints / "wasam_seed0.fltl", tmp_path / "surface",
                              steps=3, crop_ranges=((-1.0, 0.0), (-1.0, 1.0)))
    assert len(pd.read_csv(tmp_path / "surface" / "surface.csv")) == 2 * 3 * 2
    assert list(grid.alphas) == [-1.0, 0.0]
    annotations = pd.read_csv(tmp_path / "surface" / "annotations.csv")
    assert "train_loss_min" in set(annotations["annotation"])


def test_checkpoints_must_fit_the_model(tmp_path, small_config) -> None:
    _, foreign = build_model("mlp[2-5-2]", RngStream(0))
    path = save_checkpoint(tmp_path / "foreign.fltl", foreign)
    with pytest.raises(LayoutMismatchError):
        surface_checkpoint(small_config, path, tmp_path / "out", steps=3)


@pytest.mark.slow
def test_moons_sweep_wasam_does_not_degrade_and_reruns_identically(tmp_path) -> None:
    config = load_config(CONFIGS / "moons.json")
    result = run_experiment(config, out_dir=tmp_path / "a", workers=4)
    assert result.table.value == "metric"
    assert result.table.non_degradation(within_stderr=True)
    again = run_experiment(config, out_dir=tmp_path / "b", workers=4)
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    assert again.table.to_text() == result.table.to_text()
