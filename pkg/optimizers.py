"""Base optimizers and the two flat-minima mechanisms.

``base_step`` implements SGD, SGD with momentum and Adam. ``sam_step`` wraps any base
optimizer with the sharpness-aware two-gradient update; ``average_update`` keeps the
cumulative moving average used by SWA. ``run_training`` composes them per flat mode:

    none   base optimizer
    swa    base optimizer, iterates averaged from epoch E every ν iterations
    sam    sharpness-aware steps
    wasam  sharpness-aware steps, iterates averaged as in swa
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from autodiff import EvalCounter, Gradient, ParameterVector, gradient
from data import sample_batches
from errors import ConfigError, NonFiniteError
from models import evaluate

logger = logging.getLogger(__name__)

BASE_KINDS = ("sgd", "sgd-momentum", "adam")
SCHEDULES = ("constant", "cosine")
FLAT_MODES = ("none", "swa", "sam", "wasam")
SWA_START_GRID = (0.5, 0.6, 0.75, 0.9)


@dataclass(frozen=True)
class OptimizerConfig:
    base: str = "sgd"
    lr: float = 0.1
    schedule: str = "constant"
    momentum: float = 0.9
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 32
    # σ of the Gaussian gradient noise drawn once per iteration (toy experiments only)
    grad_noise: float = 0.0

    def __post_init__(self):
        if self.base not in BASE_KINDS:
            raise ConfigError(f"unknown base optimizer {self.base!r}; expected one of {BASE_KINDS}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        beta1, beta2 = self.adam_betas
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("adam betas must lie in [0, 1) and epsilon must be positive")
        if self.weight_decay < 0 or self.grad_noise < 0:
            raise ConfigError("weight_decay and grad_noise must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        object.__setattr__(self, "adam_betas", (float(beta1), float(beta2)))

    def learning_rate(self, step, total_steps) -> float:
        """η at 0-based ``step`` of ``total_steps``; cosine decays from η towards 0."""
        if self.schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05

    def __post_init__(self):
        if not self.rho >= 0:
            raise ConfigError(f"SAM radius rho must be non-negative, got {self.rho}")


@dataclass(frozen=True)
class AveragingConfig:
    start_frac: float = 0.75
    freq: int = None  # iterations between averaging events; None = once per epoch

    def __post_init__(self):
        if not 0 <= self.start_frac:
            raise ConfigError(f"swa_start_frac must be non-negative, got {self.start_frac}")
        if self.freq is not None and self.freq < 1:
            raise ConfigError(f"swa_freq must be at least 1, got {self.freq}")

    def start_epoch(self, epochs) -> int:
        # round half up: E = round(frac * T)
        return int(math.floor(self.start_frac * epochs + 0.5))


@dataclass(frozen=True)
class OptimizerState:
    step: int = 0
    momentum_buffer: np.ndarray = None
    exp_avg: np.ndarray = None
    exp_avg_sq: np.ndarray = None


def base_step(config: OptimizerConfig, state: OptimizerState, params: ParameterVector,
              grad: Gradient, lr=None):
    """One base-optimizer update; returns ``(new params, new state)``."""
    params.check_layout(grad)
    if not grad.is_finite():
        raise NonFiniteError("step", "gradient")
    lr = config.lr if lr is None else lr
    g = grad.values
    if config.weight_decay:
        g = g + config.weight_decay * params.values

    if config.base == "sgd":
        return params.with_values(params.values - lr * g), replace(state, step=state.step + 1)

    if config.base == "sgd-momentum":
        buffer = g if state.momentum_buffer is None else config.momentum * state.momentum_buffer + g
        new_state = replace(state, step=state.step + 1, momentum_buffer=buffer)
        return params.with_values(params.values - lr * buffer), new_state

    beta1, beta2 = config.adam_betas
    t = state.step + 1
    exp_avg = (1.0 - beta1) * g if state.exp_avg is None else beta1 * state.exp_avg + (1.0 - beta1) * g
    exp_avg_sq = (1.0 - beta2) * g * g if state.exp_avg_sq is None else (
        beta2 * state.exp_avg_sq + (1.0 - beta2) * g * g
    )
    m_hat = exp_avg / (1.0 - beta1 ** t)
    v_hat = exp_avg_sq / (1.0 - beta2 ** t)
    update = lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    new_state = replace(state, step=t, exp_avg=exp_avg, exp_avg_sq=exp_avg_sq)
    return params.with_values(params.values - update), new_state


def sam_perturbation(params: ParameterVector, grad: Gradient, rho) -> ParameterVector:
    """ε̂ = ρ·g/‖g‖₂, or the zero vector when the gradient vanishes."""
    if not rho >= 0:
        raise ConfigError(f"SAM radius rho must be non-negative, got {rho}")
    params.check_layout(grad)
    norm = grad.norm()
    if norm == 0.0 or rho == 0:
        return ParameterVector.zeros(params.layout)
    return ParameterVector(grad.values * (rho / norm), params.layout)


@dataclass(frozen=True)
class SamStepRecord:
    perturbation: ParameterVector
    grad_norm: float
    perturbed_grad: Gradient


def sam_step(config, state, model, params, batch, rho, lr=None, counter=None, noise=None):
    """Sharpness-aware update on one minibatch.

    Both gradients use the same batch (and the same injected noise). The base optimizer is
    applied at the original parameters with the gradient taken at ``params + ε̂``.
    """
    first = gradient(model, params, batch, counter)
    if noise is not None:
        first = first.plus(noise)
    if not first.is_finite():
        raise NonFiniteError("backward", "pre-perturbation gradient")
    perturbation = sam_perturbation(params, first, rho)
    perturbed = params + perturbation if perturbation.values.any() else params
    second = gradient(model, perturbed, batch, counter)
    if noise is not None:
        second = second.plus(noise)
    new_params, new_state = base_step(config, state, params, second, lr)
    return new_params, new_state, SamStepRecord(perturbation, first.norm(), second)


@dataclass(frozen=True)
class AveragedState:
    """Cumulative moving average θ^SWA over ``count`` snapshots."""

    params: ParameterVector = None
    count: int = 0
    start_epoch: int = 0
    freq: int = 1


def average_update(avg: AveragedState, current: ParameterVector, epoch, iteration) -> AveragedState:
    """θ^SWA ← (θ^SWA·k + θ)/(k+1) when ``epoch >= E`` and ``iteration % ν == 0``."""
    if epoch < avg.start_epoch or iteration % avg.freq != 0:
        return avg
    if avg.params is None:
        return replace(avg, params=current, count=1)
    avg.params.check_layout(current)
    k = avg.count
    values = (avg.params.values * k + current.values) / (k + 1)
    return replace(avg, params=current.with_values(values), count=k + 1)


@dataclass
class TrainingResult:
    mode: str
    params: ParameterVector
    averaged: ParameterVector = None
    averaged_count: int = 0
    history: pd.DataFrame = field(default_factory=pd.DataFrame)
    diverged: bool = False
    diverged_at: int = None
    steps: int = 0
    gradient_evals: int = 0

    @property
    def solution(self) -> ParameterVector:
        """The averaged parameters for swa/wasam, the final iterate otherwise."""
        if self.mode in ("swa", "wasam"):
            return self.averaged
        return self.params


def _averaging_events(start_epoch, freq, epochs, per_epoch) -> int:
    first = start_epoch * per_epoch + 1
    last = epochs * per_epoch
    if first > last:
        return 0
    return last // freq - (first - 1) // freq


def _history_rows(model, data, epoch, solution, params):
    rows = []
    for split in ("train", "val"):
        result = evaluate(model, params, data, split)
        rows.append({
            "epoch": epoch,
            "solution": solution,
            "split": split,
            "loss": result.loss,
            "metric": result.metric,
        })
    return rows


def run_training(model, data, config: OptimizerConfig, flat_mode, rng, params,
                 sam: SamConfig = None, averaging: AveragingConfig = None,
                 counter: EvalCounter = None, observer=None, track_history=True) -> TrainingResult:
    """Train from ``params`` for ``config.epochs`` epochs under one flat mode.

    All modes draw minibatches (and gradient noise) from the same streams of ``rng``, so runs
    that share ``rng`` and ``params`` see identical data. Averaging only observes the iterates.
    ``observer(iteration, params, averaged_state)`` is called after every update.
    """
    if flat_mode not in FLAT_MODES:
        raise ConfigError(f"unknown flat mode {flat_mode!r}; expected one of {FLAT_MODES}")
    uses_sam = flat_mode in ("sam", "wasam")
    averages = flat_mode in ("swa", "wasam")
    if uses_sam and sam is None:
        raise ConfigError(f"flat mode {flat_mode!r} needs a SAM configuration")
    if averages and averaging is None:
        raise ConfigError(f"flat mode {flat_mode!r} needs an averaging configuration")
    counter = counter if counter is not None else EvalCounter()

    train_size = data.split_indices("train").size
    per_epoch = math.ceil(train_size / config.batch_size)
    total_steps = config.epochs * per_epoch
    avg = AveragedState()
    if averages:
        start = averaging.start_epoch(config.epochs)
        freq = averaging.freq or per_epoch
        if _averaging_events(start, freq, config.epochs, per_epoch) == 0:
            raise ConfigError(
                f"averaging window is empty: E={start} of T={config.epochs} epochs, nu={freq}"
            )
        avg = AveragedState(start_epoch=start, freq=freq)

    noise_source = rng.child("noise").generator() if config.grad_noise > 0 else None
    state = OptimizerState()
    history = []
    iteration = 0
    logger.debug("training %s: %s for %d steps", model.spec, flat_mode, total_steps)

    def finish(diverged_at=None):
        return TrainingResult(
            mode=flat_mode,
            params=params,
            averaged=avg.params,
            averaged_count=avg.count,
            history=pd.DataFrame(history, columns=["epoch", "solution", "split", "loss", "metric"]),
            diverged=diverged_at is not None,
            diverged_at=diverged_at,
            steps=iteration,
            gradient_evals=counter.gradient_evals,
        )

    for epoch in range(config.epochs):
        for batch in sample_batches(data, "train", config.batch_size, rng, epoch):
            lr = config.learning_rate(iteration, total_steps)
            noise = None
            if noise_source is not None:
                noise = config.grad_noise * noise_source.standard_normal(params.size)
            try:
                if uses_sam:
                    new_params, state, _ = sam_step(config, state, model, params, batch,
                                                    sam.rho, lr=lr, counter=counter, noise=noise)
                else:
                    grad = gradient(model, params, batch, counter)
                    if noise is not None:
                        grad = grad.plus(noise)
                    new_params, state = base_step(config, state, params, grad, lr)
                if not new_params.is_finite():
                    raise NonFiniteError("step", "parameters")
            except NonFiniteError as exc:
                logger.warning("%s run diverged at iteration %d: %s", flat_mode, iteration + 1, exc)
                return finish(diverged_at=iteration + 1)
            params = new_params
            iteration += 1
            if averages:
                avg = average_update(avg, params, epoch, iteration)
            if observer is not None:
                observer(iteration, params, avg)

        if track_history:
            history.extend(_history_rows(model, data, epoch, "iterate", params))
            if avg.count:
                history.extend(_history_rows(model, data, epoch, "averaged", avg.params))
            logger.debug("epoch %d done (%s)", epoch, flat_mode)

    return finish()
