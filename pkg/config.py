"""Experiment configuration: JSON files, dotted overrides and environment defaults."""

from __future__ import annotations

import json
import logging
import os
from copy import deepcopy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

from autodiff import RngStream
from data import GENERATORS, generate, load_idx, placeholder
from errors import ConfigError
from models import ANALYTIC_DEFAULTS, AnalyticModel, analytic_loss, build_model
from optimizers import SWA_START_GRID, AveragingConfig, OptimizerConfig, SamConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ("baseline", "swa", "sam", "wasam")
FLAT_MODES = {"baseline": "none", "swa": "swa", "sam": "sam", "wasam": "wasam"}
RHO_GRID = (0.01, 0.02, 0.05, 0.1, 0.2)
DATA_KINDS = GENERATORS + ("idx", "placeholder")

# keys of the optimizer section that configure the run rather than the base optimizer
RUN_KEYS = ("rho", "swa_start_frac", "swa_freq", "seed")


def env_defaults() -> dict:
    """Defaults read from the environment (and a ``.env`` file in the working directory)."""
    load_dotenv()
    try:
        workers = int(os.getenv("FLATLAB_WORKERS", "1"))
    except ValueError:
        raise ConfigError("FLATLAB_WORKERS must be an integer") from None
    return {
        "workers": max(1, workers),
        "output_dir": os.getenv("FLATLAB_OUTPUT_DIR", "runs"),
        "log_level": os.getenv("FLATLAB_LOG_LEVEL", "INFO").upper(),
    }


@dataclass(frozen=True)
class DataSpec:
    kind: str = "two-moons"
    n: int = 200
    noise: float = 0.1
    seed: int = 0
    classes: int = 3
    side: int = 8
    images: str = None
    labels: str = None

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ConfigError(f"data.kind: unknown dataset {self.kind!r}; expected one of {DATA_KINDS}")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ConfigError("data: idx datasets need 'images' and 'labels' paths")

    def build(self):
        if self.kind == "placeholder":
            return placeholder(self.n)
        if self.kind == "idx":
            return load_idx(self.images, self.labels, seed=self.seed)
        return generate(self.kind, self.n, noise=self.noise, seed=self.seed,
                        classes=self.classes, side=self.side)


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    data: DataSpec = field(default_factory=DataSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    modes: tuple = MODES
    seeds: tuple = (0, 1, 2)
    rho_grid: tuple = RHO_GRID
    swa_start_grid: tuple = SWA_START_GRID
    rho: float = 0.05
    swa_start_frac: float = 0.75
    swa_freq: int = None
    seed: int = 0
    output_dir: str = "runs"
    metric: str = None
    # analytic losses only: shape parameters and the starting point θ₀
    model_shape: dict = field(default_factory=dict)
    init: tuple = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        unknown = [mode for mode in self.modes if mode not in MODES]
        if unknown or not self.modes:
            raise ConfigError(f"modes: expected a non-empty subset of {MODES}, got {list(self.modes)}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        if {"sam", "wasam"} & set(self.modes) and not self.rho_grid:
            raise ConfigError("rho_grid: must be non-empty when sam or wasam is selected")
        if {"swa", "wasam"} & set(self.modes) and not self.swa_start_grid:
            raise ConfigError("swa_start_grid: must be non-empty when swa or wasam is selected")
        for rho in self.rho_grid:
            SamConfig(rho)
        for frac in self.swa_start_grid:
            AveragingConfig(frac, self.swa_freq)

    @property
    def is_analytic(self) -> bool:
        return self.model in ANALYTIC_DEFAULTS

    def sam(self, rho=None) -> SamConfig:
        return SamConfig(self.rho if rho is None else rho)

    def averaging(self, start_frac=None) -> AveragingConfig:
        return AveragingConfig(self.swa_start_frac if start_frac is None else start_frac, self.swa_freq)

    def build_model(self, seed, dataset):
        """Model and θ₀ for ``seed``; every mode of a seed starts from this same θ₀."""
        rng = RngStream(seed).child("model")
        if self.is_analytic:
            model = AnalyticModel(analytic_loss(self.model, **self.model_shape))
            if self.init is not None:
                theta = np.asarray(self.init, dtype=np.float64)
            else:
                theta = rng.child("init").generator().standard_normal(model.analytic.dim)
            return model, model.params(theta)
        regression = not np.issubdtype(np.asarray(dataset.labels).dtype, np.integer)
        model, params = build_model(self.model, rng, image_side=dataset.image_side or 8,
                                    metric=self.metric, regression=regression)
        if model.input_dim != dataset.dim:
            raise ConfigError(f"model: {self.model} expects {model.input_dim} inputs, "
                              f"dataset {dataset.provenance} has {dataset.dim}")
        return model, params

    def to_dict(self) -> dict:
        raw = asdict(self)
        optimizer = raw.pop("optimizer")
        optimizer["adam_betas"] = list(optimizer["adam_betas"])
        for key in RUN_KEYS:
            optimizer[key] = raw.pop(key)
        raw["optimizer"] = optimizer
        for key in ("modes", "seeds", "rho_grid", "swa_start_grid"):
            raw[key] = list(raw[key])
        if raw["init"] is not None:
            raw["init"] = list(raw["init"])
        return raw

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides; values are JSON-decoded, falling back to strings."""
    raw = deepcopy(raw)
    for override in overrides or ():
        key, sep, value = override.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {override!r} is not of the form key=value")
        *parents, leaf = key.strip().split(".")
        node = raw
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
            node = child
        node[leaf] = _parse_value(value.strip())
    return raw


def _section(raw, name, factory):
    section = raw.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"{name}: expected an object")
    try:
        return factory(**section)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = deepcopy(raw)
    if "model" not in raw:
        raise ConfigError("model: missing")
    optimizer = dict(raw.pop("optimizer", {}) or {})
    run = {key: optimizer.pop(key) for key in RUN_KEYS if key in optimizer}
    if "adam_betas" in optimizer:
        optimizer["adam_betas"] = tuple(optimizer["adam_betas"])
    data = _section(raw, "data", DataSpec)
    raw.pop("data", None)
    opt = _section({"optimizer": optimizer}, "optimizer", OptimizerConfig)
    for key in ("modes", "seeds", "rho_grid", "swa_start_grid", "init"):
        if raw.get(key) is not None:
            raw[key] = tuple(raw[key])
    try:
        return ExperimentConfig(data=data, optimizer=opt, **run, **raw)
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from exc


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    config = parse_config(apply_overrides(raw, overrides))
    logger.info("loaded config %s (model %s, modes %s)", path, config.model, ",".join(config.modes))
    return config
