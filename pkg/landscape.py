"""Loss-landscape analysis: linear interpolations, 2D random-direction surfaces, sharpness.

Every evaluated point gets fresh batch-norm statistics from the training split, so a point
is scored exactly as a standalone evaluation of the same parameters would score it.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from autodiff import ParameterVector, RngStream, linear_combination
from errors import ConfigError, DataFormatError, DegenerateDirectionError, NonFiniteError
from models import evaluate, recompute_bn_stats
from utils.data_utils import write_csv

logger = logging.getLogger(__name__)

GRID_COLUMNS = ["alpha", "beta", "split", "loss", "metric", "flag_nonfinite"]
BARRIER_COLUMNS = ["alpha_star", "barrier_height", "loss_theta", "loss_theta_prime", "max_loss"]
NORMALIZATIONS = ("filter", "global", "none")
INTERPOLATION_RANGE = (-1.0, 1.5)
SURFACE_RANGE = (-1.0, 1.0)
MAX_REDRAWS = 16
DEGENERATE_TOLERANCE = 1e-12


# ---------------------------------------------------------------------------
# Point evaluation
# ---------------------------------------------------------------------------


def _evaluate_point(model, params, data, splits):
    """(loss, metric, nonfinite) per split, sharing one batch-norm recompute."""
    try:
        bn_state = recompute_bn_stats(model, params, data)
    except NonFiniteError:
        return [(math.nan, math.nan, True) for _ in splits]
    results = []
    for split in splits:
        result = evaluate(model, params, data, split, bn_state=bn_state)
        results.append((result.loss, result.metric, result.nonfinite))
    return results


def _check_splits(data, splits):
    for split in splits:
        if data.split_indices(split).size == 0:
            raise DataFormatError(f"evaluation split {split!r} is empty")


@dataclass
class LandscapeGrid:
    """Evaluated cells of a 1D (``beta`` empty) or 2D landscape, one row per cell and split."""

    frame: pd.DataFrame
    alphas: np.ndarray
    betas: np.ndarray = None
    annotations: dict = field(default_factory=dict)

    @property
    def is_2d(self) -> bool:
        return self.betas is not None

    @property
    def cell_count(self) -> int:
        return len(self.alphas) * (len(self.betas) if self.is_2d else 1)

    @property
    def splits(self) -> list:
        return list(dict.fromkeys(self.frame["split"]))

    def split(self, name) -> pd.DataFrame:
        rows = self.frame[self.frame["split"] == name]
        if rows.empty:
            raise ConfigError(f"grid has no rows for split {name!r}")
        return rows.reset_index(drop=True)

    def annotate(self) -> dict:
        """Train-loss minimizer/maximizer and test-metric maximizer cells."""
        notes = {}
        for split, column, pick, key in (
            ("train", "loss", "idxmin", "train_loss_min"),
            ("train", "loss", "idxmax", "train_loss_max"),
            ("test", "metric", "idxmax", "test_metric_max"),
        ):
            rows = self.frame[self.frame["split"] == split]
            values = rows[column].dropna()
            if values.empty:
                continue
            row = rows.loc[getattr(values, pick)()]
            notes[key] = {"alpha": row["alpha"], "beta": row["beta"], "value": row[column]}
        self.annotations = notes
        return notes

    def annotation_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"annotation": key, **cell} for key, cell in self.annotations.items()],
            columns=["annotation", "alpha", "beta", "value"],
        )

    def to_frame(self) -> pd.DataFrame:
        frame = self.frame[GRID_COLUMNS].copy()
        frame["flag_nonfinite"] = frame["flag_nonfinite"].astype(int)
        return frame

    def to_csv(self, path):
        return write_csv(self.to_frame(), path)

    @classmethod
    def from_csv(cls, path) -> "LandscapeGrid":
        try:
            frame = pd.read_csv(path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            raise DataFormatError(f"cannot read grid {path}: {exc}") from exc
        if list(frame.columns) != GRID_COLUMNS:
            raise DataFormatError(f"{path}: expected columns {GRID_COLUMNS}")
        frame["flag_nonfinite"] = frame["flag_nonfinite"].astype(bool)
        alphas = np.unique(frame["alpha"].to_numpy())
        betas = None
        if frame["beta"].notna().any():
            betas = np.unique(frame["beta"].dropna().to_numpy())
        grid = cls(frame, alphas, betas)
        grid.annotate()
        return grid


# ---------------------------------------------------------------------------
# Linear interpolation
# ---------------------------------------------------------------------------


def alpha_grid(alpha_min=INTERPOLATION_RANGE[0], alpha_max=INTERPOLATION_RANGE[1], steps=26):
    """Equally spaced α values that always contain 0 and 1 exactly."""
    if steps < 2 or not alpha_max > alpha_min:
        raise ConfigError("an interpolation needs steps >= 2 and alpha_max > alpha_min")
    alphas = np.linspace(alpha_min, alpha_max, steps)
    spacing = (alpha_max - alpha_min) / (steps - 1)
    for anchor in (0.0, 1.0):
        close = np.abs(alphas - anchor) < 1e-9 * max(1.0, spacing)
        if close.any():
            alphas[close] = anchor
        else:
            alphas = np.append(alphas, anchor)
    return np.unique(alphas)


@dataclass(frozen=True, eq=False)
class InterpolationSpec:
    theta: ParameterVector
    theta_prime: ParameterVector
    alpha_min: float = INTERPOLATION_RANGE[0]
    alpha_max: float = INTERPOLATION_RANGE[1]
    steps: int = 26
    splits: tuple = ("train", "test")
    barrier_split: str = "train"

    def __post_init__(self):
        self.theta.check_layout(self.theta_prime)
        if self.barrier_split not in self.splits:
            raise ConfigError(f"barrier split {self.barrier_split!r} is not evaluated")
        object.__setattr__(self, "_same_endpoints",
                           bool(np.array_equal(self.theta.values, self.theta_prime.values)))

    @property
    def alphas(self) -> np.ndarray:
        return alpha_grid(self.alpha_min, self.alpha_max, self.steps)

    def point(self, alpha) -> ParameterVector:
        """θ(α) = (1−α)θ + αθ′, with the endpoints returned unchanged.

        A segment from θ to itself is the single point θ at every α.
        """
        if alpha == 0.0 or self._same_endpoints:
            return self.theta
        if alpha == 1.0:
            return self.theta_prime
        return linear_combination(1.0 - alpha, self.theta, alpha, self.theta_prime)


@dataclass(frozen=True)
class BarrierReport:
    alpha_star: float
    barrier_height: float
    loss_theta: float
    loss_theta_prime: float
    max_loss: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{name: getattr(self, name) for name in BARRIER_COLUMNS}])

    def to_csv(self, path):
        return write_csv(self.to_frame(), path)


def barrier(grid: LandscapeGrid, split="train") -> BarrierReport:
    """Highest loss on the closed segment α ∈ [0, 1] above the higher endpoint."""
    rows = grid.split(split)
    inside = rows[(rows["alpha"] >= 0.0) & (rows["alpha"] <= 1.0)]
    if not {0.0, 1.0} <= set(inside["alpha"]):
        raise ConfigError("a barrier needs both endpoints alpha=0 and alpha=1 in the grid")
    loss_theta = float(inside.loc[inside["alpha"] == 0.0, "loss"].iloc[0])
    loss_theta_prime = float(inside.loc[inside["alpha"] == 1.0, "loss"].iloc[0])
    finite = inside["loss"].dropna()
    if finite.empty:
        return BarrierReport(math.nan, math.nan, loss_theta, loss_theta_prime, math.nan)
    peak = finite.idxmax()
    max_loss = float(inside.loc[peak, "loss"])
    return BarrierReport(
        alpha_star=float(inside.loc[peak, "alpha"]),
        barrier_height=max_loss - max(loss_theta, loss_theta_prime),
        loss_theta=loss_theta,
        loss_theta_prime=loss_theta_prime,
        max_loss=max_loss,
    )


def interpolate(spec: InterpolationSpec, model, data):
    """Evaluate the line through ``spec.theta`` (α=0) and ``spec.theta_prime`` (α=1)."""
    _check_splits(data, spec.splits)
    alphas = spec.alphas
    rows = []
    for alpha in alphas:
        point = spec.point(float(alpha))
        for split, (loss, metric, nonfinite) in zip(spec.splits,
                                                    _evaluate_point(model, point, data, spec.splits)):
            rows.append({"alpha": float(alpha), "beta": math.nan, "split": split,
                         "loss": loss, "metric": metric, "flag_nonfinite": nonfinite})
    grid = LandscapeGrid(pd.DataFrame(rows, columns=GRID_COLUMNS), alphas)
    grid.annotate()
    report = barrier(grid, spec.barrier_split)
    logger.info("interpolated %d points, barrier %.6g at alpha=%.3g",
                len(alphas), report.barrier_height, report.alpha_star)
    return grid, report


@dataclass(frozen=True)
class ProfileSummary:
    train_loss_argmin: float
    test_loss_argmin: float
    test_metric_argmax: float
    loss_minimizers_disagree: bool
    metric_disagrees_with_loss: bool

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([self.__dict__])
        for column in ("loss_minimizers_disagree", "metric_disagrees_with_loss"):
            frame[column] = frame[column].astype(int)
        return frame


def _arg(rows, column, pick):
    values = rows[column].dropna()
    if values.empty:
        return math.nan
    return float(rows.loc[getattr(values, pick)(), "alpha"])


def profile_summary(grid: LandscapeGrid, train_split="train", test_split="test") -> ProfileSummary:
    """Where along a 1D profile the train loss, test loss and test metric are optimal."""
    if grid.is_2d:
        raise ConfigError("profile summaries need a 1D interpolation grid")
    train = grid.split(train_split)
    test = grid.split(test_split)
    train_min = _arg(train, "loss", "idxmin")
    test_min = _arg(test, "loss", "idxmin")
    metric_max = _arg(test, "metric", "idxmax")
    return ProfileSummary(
        train_loss_argmin=train_min,
        test_loss_argmin=test_min,
        test_metric_argmax=metric_max,
        loss_minimizers_disagree=train_min != test_min,
        metric_disagrees_with_loss=not math.isnan(metric_max) and metric_max != test_min,
    )


def standard_pairs(solutions: dict) -> list:
    """``(name, θ, θ′)`` comparisons between the solutions of one seed.

    The flatter solution sits at α=0: SWA and SAM against the baseline, WASAM against SAM.
    """
    pairs = []
    for name, first, second in (
        ("baseline-swa", "swa", "baseline"),
        ("baseline-sam", "sam", "baseline"),
        ("sam-wasam", "wasam", "sam"),
    ):
        if first in solutions and second in solutions:
            pairs.append((name, solutions[first], solutions[second]))
    return pairs


# ---------------------------------------------------------------------------
# Random-direction planes
# ---------------------------------------------------------------------------


def normalization_blocks(layout, normalization) -> list:
    """Index ranges normalized (and orthogonalized) together.

    Filter mode gives one block per filter / output row of every rank >= 2 weight segment and
    one block per remaining segment; the other modes use the whole vector.
    """
    if normalization not in NORMALIZATIONS:
        raise ConfigError(f"unknown normalization {normalization!r}; expected one of {NORMALIZATIONS}")
    if normalization != "filter":
        return [slice(0, layout.size)]
    blocks = []
    for segment in layout.segments:
        if segment.kind == "weight" and len(segment.shape) >= 2:
            row = segment.size // segment.shape[0]
            blocks.extend(
                slice(segment.offset + i * row, segment.offset + (i + 1) * row)
                for i in range(segment.shape[0])
            )
        else:
            blocks.append(slice(segment.offset, segment.stop))
    return blocks


def orthogonalize(delta, eta, blocks):
    """Gram-Schmidt of ``eta`` against ``delta`` inside every block.

    Returns the orthogonalized copy of ``eta`` or None when a block is degenerate.
    """
    eta = np.array(eta, dtype=np.float64)
    for block in blocks:
        d = delta[block]
        e = eta[block]
        if e.size == 1:
            eta[block] = 0.0
            continue
        raw_norm = np.linalg.norm(e)
        dd = float(d @ d)
        if dd == 0.0 or raw_norm == 0.0:
            return None
        for _ in range(2):
            e = e - (float(e @ d) / dd) * d
        if np.linalg.norm(e) <= DEGENERATE_TOLERANCE * raw_norm:
            return None
        eta[block] = e
    return eta


def _normalize(direction, center, blocks, normalization):
    if normalization == "none":
        return direction
    direction = direction.copy()
    for block in blocks:
        norm = np.linalg.norm(direction[block])
        target = np.linalg.norm(center[block])
        direction[block] = direction[block] * (target / norm) if norm > 0 else 0.0
    return direction


@dataclass(frozen=True, eq=False)
class DirectionPair:
    delta: ParameterVector
    eta: ParameterVector
    normalization: str = "filter"
    orthogonalized: bool = True

    @classmethod
    def prepare(cls, center: ParameterVector, delta, eta, normalization="filter") -> "DirectionPair":
        """Orthogonalize raw ``delta``/``eta`` arrays and normalize them to ``center``."""
        blocks = normalization_blocks(center.layout, normalization)
        delta = np.asarray(delta, dtype=np.float64).reshape(-1)
        orthogonal = orthogonalize(delta, eta, blocks)
        if orthogonal is None:
            raise DegenerateDirectionError("eta is parallel to delta in at least one block")
        if normalization == "global" and center.norm() == 0.0:
            raise DegenerateDirectionError("global normalization needs a non-zero center")
        return cls(
            ParameterVector(_normalize(delta, center.values, blocks, normalization), center.layout),
            ParameterVector(_normalize(orthogonal, center.values, blocks, normalization), center.layout),
            normalization,
        )


def sample_plane(center: ParameterVector, rng: RngStream, normalization="filter") -> DirectionPair:
    """Two Gaussian directions, orthogonalized and normalized around ``center``."""
    blocks = normalization_blocks(center.layout, normalization)
    generator = rng.child("plane").generator()
    for attempt in range(MAX_REDRAWS):
        delta = generator.standard_normal(center.size)
        eta = generator.standard_normal(center.size)
        if orthogonalize(delta, eta, blocks) is not None:
            return DirectionPair.prepare(center, delta, eta, normalization)
        logger.debug("redrawing degenerate direction pair (attempt %d)", attempt + 1)
    raise DegenerateDirectionError(f"no usable direction pair after {MAX_REDRAWS} draws")


def surface(center: ParameterVector, pair: DirectionPair, model, data,
            alpha_range=SURFACE_RANGE, beta_range=SURFACE_RANGE, steps=(20, 20),
            splits=("train", "test"), workers=1) -> LandscapeGrid:
    """f(α, β) = L(θ + αδ + βη) on a row-major grid (α outer, β inner)."""
    if isinstance(steps, int):
        steps = (steps, steps)
    if min(steps) < 2:
        raise ConfigError("a surface needs at least 2 steps per axis")
    center.check_layout(pair.delta)
    center.check_layout(pair.eta)
    _check_splits(data, splits)
    alphas = np.linspace(alpha_range[0], alpha_range[1], steps[0])
    betas = np.linspace(beta_range[0], beta_range[1], steps[1])
    cells = [(float(a), float(b)) for a in alphas for b in betas]

    def evaluate_cell(cell):
        alpha, beta = cell
        values = center.values + alpha * pair.delta.values + beta * pair.eta.values
        return _evaluate_point(model, center.with_values(values), data, splits)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate_cell, cells))
    else:
        results = [evaluate_cell(cell) for cell in cells]

    rows = []
    flagged = 0
    for (alpha, beta), per_split in zip(cells, results):
        for split, (loss, metric, nonfinite) in zip(splits, per_split):
            flagged += nonfinite
            rows.append({"alpha": alpha, "beta": beta, "split": split,
                         "loss": loss, "metric": metric, "flag_nonfinite": nonfinite})
    if flagged:
        logger.warning("%d surface evaluations were non-finite", flagged)
    grid = LandscapeGrid(pd.DataFrame(rows, columns=GRID_COLUMNS), alphas, betas)
    grid.annotate()
    logger.info("evaluated %d surface cells", len(cells))
    return grid


def crop(grid: LandscapeGrid, alpha_range=None, beta_range=None) -> LandscapeGrid:
    """Keep the cells inside the given ranges; nothing is re-evaluated."""
    frame = grid.frame
    alphas = grid.alphas
    betas = grid.betas
    if alpha_range is not None:
        frame = frame[frame["alpha"].between(*alpha_range)]
        alphas = alphas[(alphas >= alpha_range[0]) & (alphas <= alpha_range[1])]
    if beta_range is not None and grid.is_2d:
        frame = frame[frame["beta"].between(*beta_range)]
        betas = betas[(betas >= beta_range[0]) & (betas <= beta_range[1])]
    if frame.empty:
        raise ConfigError("crop range leaves no cells")
    cropped = LandscapeGrid(frame.reset_index(drop=True), alphas, betas)
    cropped.annotate()
    return cropped


# ---------------------------------------------------------------------------
# Sharpness
# ---------------------------------------------------------------------------


def sharpness_probe(center: ParameterVector, model, data, radius, n_samples, rng: RngStream,
                    split="train") -> float:
    """Largest loss increase among ``n_samples`` points on the sphere of ``radius`` around ``center``.

    Returns NaN when the center or any sampled point has a non-finite loss.
    """
    if n_samples < 1:
        raise ConfigError("sharpness probe needs n_samples >= 1")
    if radius < 0:
        raise ConfigError("sharpness probe radius must be non-negative")
    if radius == 0:
        return 0.0
    base = evaluate(model, center, data, split).loss
    if not math.isfinite(base):
        logger.warning("sharpness undefined: non-finite loss at the center")
        return math.nan
    generator = rng.child("probe").generator()
    worst = -math.inf
    for _ in range(n_samples):
        direction = generator.standard_normal(center.size)
        direction /= np.linalg.norm(direction)
        loss = evaluate(model, center.with_values(center.values + radius * direction), data, split).loss
        if not math.isfinite(loss):
            logger.warning("sharpness undefined: non-finite loss at radius %g", radius)
            return math.nan
        worst = max(worst, loss - base)
    return float(worst)
