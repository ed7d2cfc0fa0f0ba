"""Experiment driver: per-seed training grids, validation selection, aggregation and reports.

A sweep trains every (seed, mode, grid point) job, picks each mode's hyperparameters on the
mean validation metric, evaluates the selected setting once on the test split and writes

    config.json              the resolved configuration
    results.csv              one row per job on val, plus the selected settings on test
    summary.csv, table.txt   the aggregated result table
    checkpoints/             the selected solution of every (mode, seed)
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from io import BytesIO
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from autodiff import EvalCounter, RngStream, parameter_distance
from config import FLAT_MODES, MODES, ExperimentConfig
from errors import ResultsError
from landscape import (
    InterpolationSpec,
    crop,
    interpolate,
    profile_summary,
    sample_plane,
    standard_pairs,
    surface,
)
from models import evaluate
from optimizers import run_training
from utils.data_utils import load_checkpoint, save_checkpoint, write_csv

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["mode", "rho", "swa_start_frac", "seed", "split", "metric", "loss", "diverged"]
SUMMARY_COLUMNS = ["mode", "rho", "swa_start_frac", "n_seeds", "n_diverged", "mean", "stderr",
                   "delta", "best", "values"]
HISTORY_COLUMNS = ["epoch", "mode", "split", "loss", "metric", "averaged"]


# ---------------------------------------------------------------------------
# Jobs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Job:
    mode: str
    seed: int
    rho: float = None
    swa_start_frac: float = None

    @property
    def setting(self) -> tuple:
        return (self.rho, self.swa_start_frac)


@dataclass
class JobResult:
    job: Job
    val_loss: float
    val_metric: float
    diverged: bool
    gradient_evals: int
    solution: object = None


def grid_jobs(config: ExperimentConfig) -> list:
    """Every (seed, mode, grid point) in a fixed order."""
    jobs = []
    for seed in config.seeds:
        for mode in MODES:
            if mode not in config.modes:
                continue
            if mode == "baseline":
                jobs.append(Job(mode, seed))
            elif mode == "swa":
                jobs.extend(Job(mode, seed, swa_start_frac=frac) for frac in config.swa_start_grid)
            elif mode == "sam":
                jobs.extend(Job(mode, seed, rho=rho) for rho in config.rho_grid)
            else:
                jobs.extend(Job(mode, seed, rho=rho, swa_start_frac=frac)
                            for rho in config.rho_grid for frac in config.swa_start_grid)
    return jobs


def train_job(config: ExperimentConfig, job: Job, dataset=None, track_history=False):
    """Train one job from the seed's shared θ₀; returns ``(model, dataset, TrainingResult)``."""
    dataset = dataset if dataset is not None else config.data.build()
    model, params = config.build_model(job.seed, dataset)
    flat_mode = FLAT_MODES[job.mode]
    sam = config.sam(job.rho) if job.mode in ("sam", "wasam") else None
    averaging = config.averaging(job.swa_start_frac) if job.mode in ("swa", "wasam") else None
    result = run_training(model, dataset, config.optimizer, flat_mode, RngStream(job.seed), params,
                          sam=sam, averaging=averaging, counter=EvalCounter(),
                          track_history=track_history)
    return model, dataset, result


def run_job(config: ExperimentConfig, job: Job) -> JobResult:
    model, dataset, result = train_job(config, job)
    solution = result.solution
    if result.diverged or solution is None:
        return JobResult(job, math.nan, math.nan, True, result.gradient_evals)
    val = evaluate(model, solution, dataset, "val")
    return JobResult(job, val.loss, val.metric, val.nonfinite, result.gradient_evals, solution)


def run_jobs(config: ExperimentConfig, jobs, workers=1, progress=False) -> list:
    """Run ``jobs`` (in a process pool when ``workers > 1``); results keep the job order."""
    bar = tqdm(total=len(jobs), desc="sweep", unit="run", disable=not progress)
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for result in pool.map(partial(run_job, config), jobs):
                results.append(result)
                bar.update()
    else:
        for job in jobs:
            results.append(run_job(config, job))
            bar.update()
    bar.close()
    return results


# ---------------------------------------------------------------------------
# Selection and aggregation
# ---------------------------------------------------------------------------


def _uses_metric(values) -> bool:
    return bool(np.isfinite(np.asarray(values, dtype=np.float64)).any())


def select_settings(results) -> dict:
    """Per mode, the grid point with the best mean validation score over non-diverged seeds.

    The validation metric is maximized; models without a metric minimize the validation loss.
    Ties keep the earlier grid point.
    """
    use_metric = _uses_metric([r.val_metric for r in results])
    scores = {}
    for result in results:
        if result.diverged:
            continue
        value = result.val_metric if use_metric else -result.val_loss
        scores.setdefault(result.job.mode, {}).setdefault(result.job.setting, []).append(value)
    selected = {}
    for mode, settings in scores.items():
        best, best_score = None, -math.inf
        for setting, values in settings.items():
            score = float(np.mean(values))
            if score > best_score:
                best, best_score = setting, score
        selected[mode] = best
        logger.info("selected %s: rho=%s swa_start_frac=%s (val %.6g)",
                    mode, *best, best_score if use_metric else -best_score)
    return selected


def standard_error(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        logger.warning("standard error of a single seed is reported as 0")
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(values.size))


def best_flags(means, stderrs, higher_is_better=True) -> list:
    """Flag the top mean and every mean whose standard error band reaches it."""
    means = np.asarray(means, dtype=np.float64)
    stderrs = np.asarray(stderrs, dtype=np.float64)
    if higher_is_better:
        top = np.nanmax(means)
        return [bool(m == top or m + s >= top) for m, s in zip(means, stderrs)]
    top = np.nanmin(means)
    return [bool(m == top or m - s <= top) for m, s in zip(means, stderrs)]


@dataclass
class ResultTable:
    """Aggregated test scores of the selected setting of every mode."""

    frame: pd.DataFrame
    value: str = "metric"
    higher_is_better: bool = True

    @property
    def modes(self) -> list:
        return list(self.frame["mode"])

    def row(self, mode) -> pd.Series:
        rows = self.frame[self.frame["mode"] == mode]
        if rows.empty:
            raise ResultsError(f"no results for mode {mode!r}")
        return rows.iloc[0]

    def non_degradation(self, within_stderr=False) -> bool:
        """WASAM at least as good as the weaker of SWA and SAM."""
        if not {"wasam", "swa", "sam"} <= set(self.modes):
            raise ResultsError("non-degradation needs swa, sam and wasam results")
        wasam = self.row("wasam")
        others = [self.row("swa")["mean"], self.row("sam")["mean"]]
        slack = wasam["stderr"] if within_stderr else 0.0
        if self.higher_is_better:
            return bool(wasam["mean"] + slack >= min(others))
        return bool(wasam["mean"] - slack <= max(others))

    def to_text(self) -> str:
        """Plain-text table: baseline absolute, other modes as deltas, ``*`` on best rows."""
        has_baseline = "baseline" in self.modes
        lines = [f"{self.value} ({'higher' if self.higher_is_better else 'lower'} is better)",
                 f"{'mode':<10}{'rho':>8}{'E/T':>8}  {'score':<22}best"]
        for _, row in self.frame.iterrows():
            if has_baseline and row["mode"] != "baseline":
                score = f"{row['delta']:+.4f} ± {row['stderr']:.4f}"
            else:
                score = f"{row['mean']:.4f} ± {row['stderr']:.4f}"
            rho = "" if pd.isna(row["rho"]) else f"{row['rho']:g}"
            frac = "" if pd.isna(row["swa_start_frac"]) else f"{row['swa_start_frac']:g}"
            lines.append(f"{row['mode']:<10}{rho:>8}{frac:>8}  {score:<22}{'*' if row['best'] else ''}")
        if {"wasam", "swa", "sam"} <= set(self.modes):
            lines.append(f"non-degradation (wasam >= min(swa, sam)): {int(self.non_degradation())}/1")
        return "\n".join(lines) + "\n"

    def to_excel(self) -> bytes:
        buffer = BytesIO()
        with pd.ExcelWriter(buffer, engine="xlsxwriter") as writer:
            self.frame.to_excel(writer, index=False, sheet_name="summary")
        return buffer.getvalue()


def aggregate(results: pd.DataFrame, split="test") -> ResultTable:
    """Mean, standard error, baseline delta and best flag per mode from a results frame."""
    missing = set(RESULT_COLUMNS) - set(results.columns)
    if missing:
        raise ResultsError(f"results are missing columns {sorted(missing)}")
    rows = results[results["split"] == split]
    if rows.empty:
        raise ResultsError(f"no {split} results to aggregate")
    value = "metric" if _uses_metric(rows["metric"]) else "loss"
    higher = value == "metric"
    records = []
    for mode in [m for m in MODES if m in set(rows["mode"])]:
        mode_rows = rows[rows["mode"] == mode]
        diverged = mode_rows["diverged"].astype(bool)
        values = mode_rows.loc[~diverged, value].to_numpy(dtype=np.float64)
        if diverged.any():
            logger.warning("%s: %d diverged runs excluded", mode, int(diverged.sum()))
        records.append({
            "mode": mode,
            "rho": mode_rows["rho"].iloc[0],
            "swa_start_frac": mode_rows["swa_start_frac"].iloc[0],
            "n_seeds": int(values.size),
            "n_diverged": int(diverged.sum()),
            "mean": float(values.mean()) if values.size else math.nan,
            "stderr": standard_error(values) if values.size else math.nan,
            "values": " ".join(repr(float(v)) for v in values),
        })
    frame = pd.DataFrame(records)
    baseline = frame.loc[frame["mode"] == "baseline", "mean"]
    frame["delta"] = frame["mean"] - baseline.iloc[0] if not baseline.empty else math.nan
    frame["best"] = best_flags(frame["mean"], frame["stderr"].fillna(0.0), higher)
    return ResultTable(frame[SUMMARY_COLUMNS], value, higher)


# ---------------------------------------------------------------------------
# Sweeps and reports
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    table: ResultTable
    results: pd.DataFrame
    selected: dict
    out_dir: Path
    diverged_runs: int = 0
    total_runs: int = 0
    checkpoints: dict = field(default_factory=dict)

    @property
    def all_diverged(self) -> bool:
        return self.total_runs > 0 and self.diverged_runs == self.total_runs


def run_experiment(config: ExperimentConfig, out_dir=None, workers=1, progress=False) -> ExperimentResult:
    """Full sweep over seeds, modes and grids; writes results, summary and checkpoints."""
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.write(out_dir / "config.json")
    jobs = grid_jobs(config)
    logger.info("sweep of %d runs (%d seeds) into %s", len(jobs), len(config.seeds), out_dir)
    results = run_jobs(config, jobs, workers=workers, progress=progress)
    diverged = sum(r.diverged for r in results)
    if diverged:
        logger.warning("%d of %d runs diverged", diverged, len(results))

    rows = [_result_row(r.job, "val", r.val_metric, r.val_loss, r.diverged) for r in results]
    selected = select_settings(results)
    dataset = config.data.build()
    checkpoints = {}
    for result in results:
        job = result.job
        if selected.get(job.mode) != job.setting:
            continue
        if result.diverged:
            rows.append(_result_row(job, "test", math.nan, math.nan, True))
            continue
        model, _ = config.build_model(job.seed, dataset)
        test = evaluate(model, result.solution, dataset, "test")
        rows.append(_result_row(job, "test", test.metric, test.loss, test.nonfinite))
        path = save_checkpoint(out_dir / "checkpoints" / f"{job.mode}_seed{job.seed}.fltl", result.solution)
        checkpoints[(job.mode, job.seed)] = path

    frame = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    write_csv(frame, out_dir / "results.csv")
    table = report(out_dir) if selected else None
    return ExperimentResult(table, frame, selected, out_dir, diverged, len(results), checkpoints)


def _result_row(job, split, metric, loss, diverged):
    return {
        "mode": job.mode,
        "rho": math.nan if job.rho is None else job.rho,
        "swa_start_frac": math.nan if job.swa_start_frac is None else job.swa_start_frac,
        "seed": job.seed,
        "split": split,
        "metric": metric,
        "loss": loss,
        "diverged": int(bool(diverged)),
    }


def read_results(run_dir) -> pd.DataFrame:
    path = Path(run_dir) / "results.csv"
    if not path.exists():
        raise ResultsError(f"{path} does not exist")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ResultsError(f"{path} is not a results file: {exc}") from exc
    if list(frame.columns) != RESULT_COLUMNS:
        raise ResultsError(f"{path}: expected header {','.join(RESULT_COLUMNS)}")
    return frame


def report(run_dir, excel=False) -> ResultTable:
    """Re-aggregate ``results.csv`` into ``summary.csv`` and ``table.txt`` (and ``summary.xlsx``)."""
    run_dir = Path(run_dir)
    table = aggregate(read_results(run_dir))
    write_csv(table.frame, run_dir / "summary.csv")
    (run_dir / "table.txt").write_text(table.to_text(), encoding="utf-8")
    if excel:
        (run_dir / "summary.xlsx").write_bytes(table.to_excel())
        logger.info("wrote %s", run_dir / "summary.xlsx")
    return table


# ---------------------------------------------------------------------------
# Single runs and landscape analyses
# ---------------------------------------------------------------------------


def train_modes(config: ExperimentConfig, seed=None, out_dir=None) -> dict:
    """Train every configured mode once at the config's ρ and E; writes history and checkpoints."""
    seed = config.seed if seed is None else seed
    out_dir = Path(out_dir or config.output_dir)
    dataset = config.data.build()
    outcomes = {}
    history = []
    for mode in [m for m in MODES if m in config.modes]:
        _, _, result = train_job(config, Job(mode, seed), dataset, track_history=True)
        outcomes[mode] = result
        for record in result.history.itertuples(index=False):
            history.append({"epoch": record.epoch, "mode": mode, "split": record.split,
                            "loss": record.loss, "metric": record.metric,
                            "averaged": int(record.solution == "averaged")})
        if result.solution is not None:
            save_checkpoint(out_dir / "checkpoints" / f"{mode}_seed{seed}.fltl", result.solution)
        logger.info("%s: %d steps, %d gradient evaluations%s", mode, result.steps,
                    result.gradient_evals, " (diverged)" if result.diverged else "")
    write_csv(pd.DataFrame(history, columns=HISTORY_COLUMNS), out_dir / "history.csv")
    return outcomes


def _analysis_model(config, seed, dataset, *checkpoints):
    model, params = config.build_model(seed, dataset)
    for checkpoint in checkpoints:
        params.check_layout(checkpoint)
    return model


def _interpolate_pair(model, dataset, theta, theta_prime, out_dir, alpha_range, steps):
    spec = InterpolationSpec(theta, theta_prime, alpha_range[0], alpha_range[1], steps)
    grid, barrier = interpolate(spec, model, dataset)
    grid.to_csv(out_dir / "interpolation.csv")
    barrier.to_csv(out_dir / "barrier.csv")
    write_csv(profile_summary(grid).to_frame(), out_dir / "profile_summary.csv")
    return grid, barrier


def interpolate_checkpoints(config, a, b, out_dir, seed=None, alpha_range=(-1.0, 1.5), steps=26):
    """Interpolate between two checkpoint files (``a`` at α=0)."""
    out_dir = Path(out_dir)
    theta, theta_prime = load_checkpoint(a), load_checkpoint(b)
    dataset = config.data.build()
    model = _analysis_model(config, config.seed if seed is None else seed, dataset, theta, theta_prime)
    result = _interpolate_pair(model, dataset, theta, theta_prime, out_dir, alpha_range, steps)
    write_csv(pd.DataFrame([{"pair": f"{Path(a).stem}-{Path(b).stem}",
                             "distance": parameter_distance(theta, theta_prime)}]),
              out_dir / "distances.csv")
    return {"pair": result}


def interpolate_run(config, run_dir, seed, out_dir=None, alpha_range=(-1.0, 1.5), steps=26):
    """Standard comparisons between the saved solutions of one seed of a sweep."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir or run_dir / "interpolations" / f"seed{seed}")
    solutions = {}
    for mode in MODES:
        path = run_dir / "checkpoints" / f"{mode}_seed{seed}.fltl"
        if path.exists():
            solutions[mode] = load_checkpoint(path)
    pairs = standard_pairs(solutions)
    if not pairs:
        raise ResultsError(f"{run_dir}: no checkpoint pairs for seed {seed}")
    dataset = config.data.build()
    model = _analysis_model(config, seed, dataset, *solutions.values())
    outcomes = {}
    distances = []
    for name, theta, theta_prime in pairs:
        outcomes[name] = _interpolate_pair(model, dataset, theta, theta_prime, out_dir / name,
                                           alpha_range, steps)
        distances.append({"pair": name, "distance": parameter_distance(theta, theta_prime)})
    write_csv(pd.DataFrame(distances), out_dir / "distances.csv")
    return outcomes


def surface_checkpoint(config, checkpoint, out_dir, seed=None, steps=20, value_range=(-1.0, 1.0),
                       normalization="filter", crop_ranges=None, workers=1):
    """Random-plane surface around a checkpoint; writes ``surface.csv`` and ``annotations.csv``."""
    out_dir = Path(out_dir)
    seed = config.seed if seed is None else seed
    center = load_checkpoint(checkpoint)
    dataset = config.data.build()
    model = _analysis_model(config, seed, dataset, center)
    pair = sample_plane(center, RngStream(seed).child("surface"), normalization)
    grid = surface(center, pair, model, dataset, value_range, value_range, (steps, steps),
                   workers=workers)
    if crop_ranges is not None:
        alpha_range, beta_range = crop_ranges
        grid = crop(grid, alpha_range, beta_range)
    grid.to_csv(out_dir / "surface.csv")
    write_csv(grid.annotation_frame(), out_dir / "annotations.csv")
    return grid
