"""Model zoo, analytic toy losses, batch-norm statistics and evaluation.

Architectures are named by spec strings of the form ``name[int-int-...]``:

    linear[in-out]       one dense layer
    mlp[in-h1-...-out]   dense layers with ReLU between them
    mlpbn[in-h1-...-out] like mlp, with batch norm after every hidden dense layer
    tinyconv[C-K]        3x3 conv (C channels) -> batch norm -> ReLU -> global avg pool -> dense K

Analytic losses (``quadratic``, ``asymmetric-valley-1d``, ``sharp-flat-bimodal-1d``,
``rosenbrock-2d``) are wrapped in :class:`AnalyticModel` so the optimizers and the
landscape tools drive them exactly like networks.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from autodiff import (
    BatchNorm,
    Conv2d,
    Dense,
    GlobalAvgPool,
    Layout,
    Network,
    ParameterVector,
    Pass,
    ReLU,
    Reshape,
    RngStream,
    SoftmaxCrossEntropy,
    SquaredError,
)
from errors import ConfigError, DataFormatError, NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

ARCHITECTURES = ("linear", "mlp", "mlpbn", "tinyconv")
METRIC_KINDS = ("accuracy", "f1-macro", "none")
ARCH_PATTERN = re.compile(r"^([A-Za-z][A-Za-z0-9_]*)(?:\[(\d+(?:-\d+)*)\])?$")


# ---------------------------------------------------------------------------
# Architecture specs and construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArchSpec:
    name: str
    dims: tuple

    def __str__(self):
        if not self.dims:
            return self.name
        return f"{self.name}[{'-'.join(str(d) for d in self.dims)}]"


def parse_arch(spec: str) -> ArchSpec:
    match = ARCH_PATTERN.match(spec.strip())
    if match is None:
        raise ConfigError(f"cannot parse architecture spec {spec!r}")
    name, dims = match.group(1), match.group(2)
    dims = tuple(int(d) for d in dims.split("-")) if dims else ()
    if name not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
    if any(d <= 0 for d in dims):
        raise ConfigError(f"{spec!r}: widths must be positive")
    return ArchSpec(name, dims)


class Model(Network):
    """A network from the zoo, together with its spec and the metric it reports."""

    def __init__(self, arch, layers, loss, input_dim, metric, image_side=0):
        super().__init__(layers, loss, input_dim)
        self.arch = arch
        self.metric = metric
        self.image_side = image_side

    @property
    def spec(self) -> str:
        return str(self.arch)

    def __repr__(self):
        return f"Model({self.spec}, d={self.layout.size}, metric={self.metric})"


def _mlp_layers(dims, batch_norm):
    layers = []
    depth = len(dims) - 1
    for i in range(depth):
        layers.append(Dense(f"fc{i + 1}", dims[i], dims[i + 1]))
        if i < depth - 1:
            if batch_norm:
                layers.append(BatchNorm(f"bn{i + 1}", dims[i + 1]))
            layers.append(ReLU(f"relu{i + 1}"))
    return layers


def _build_layers(arch, image_side):
    dims = arch.dims
    if arch.name == "linear":
        if len(dims) != 2:
            raise ConfigError(f"{arch}: linear takes [in-out]")
        return [Dense("fc", dims[0], dims[1])], dims[0], dims[1]
    if arch.name in ("mlp", "mlpbn"):
        if len(dims) < 2:
            raise ConfigError(f"{arch}: {arch.name} needs at least [in-out]")
        return _mlp_layers(dims, arch.name == "mlpbn"), dims[0], dims[-1]
    # tinyconv
    if len(dims) != 2:
        raise ConfigError(f"{arch}: tinyconv takes [channels-classes]")
    channels, classes = dims
    layers = [
        Reshape("input", (1, image_side, image_side)),
        Conv2d("conv1", 1, channels, kernel=3),
        BatchNorm("bn1", channels),
        ReLU("relu1"),
        GlobalAvgPool("pool"),
        Dense("fc", channels, classes),
    ]
    return layers, image_side * image_side, classes


def init_params(layout: Layout, layers, rng: RngStream) -> ParameterVector:
    """He-style uniform fan-in initialization: weights ~ U(±√(6/fan_in)), biases 0, γ=1, β=0."""
    fan_in = {}
    for layer in layers:
        if isinstance(layer, Dense):
            fan_in[f"{layer.name}.weight"] = layer.fan_in
        elif isinstance(layer, Conv2d):
            fan_in[f"{layer.name}.weight"] = layer.in_channels * layer.kernel * layer.kernel
    generator = rng.child("init").generator()
    values = np.zeros(layout.size)
    for segment in layout.segments:
        chunk = slice(segment.offset, segment.stop)
        if segment.name in fan_in:
            bound = math.sqrt(6.0 / fan_in[segment.name])
            values[chunk] = generator.uniform(-bound, bound, size=segment.size)
        elif segment.kind == "gamma":
            values[chunk] = 1.0
    return ParameterVector(values, layout)


def build_model(spec, rng: RngStream, image_side=8, metric=None, regression=False):
    """Build a zoo model from its spec string and initialize its parameters from ``rng``."""
    arch = spec if isinstance(spec, ArchSpec) else parse_arch(spec)
    layers, input_dim, outputs = _build_layers(arch, image_side)
    loss = SquaredError() if regression else SoftmaxCrossEntropy()
    if metric is None:
        metric = "none" if regression else "accuracy"
    if metric not in METRIC_KINDS:
        raise ConfigError(f"unknown metric {metric!r}; expected one of {METRIC_KINDS}")
    if regression and metric != "none":
        raise ConfigError("regression models report no classification metric")
    model = Model(arch, layers, loss, input_dim, metric,
                  image_side=image_side if arch.name == "tinyconv" else 0)
    params = init_params(model.layout, model.layers, rng)
    logger.debug("built %r with %d parameters", model, params.size)
    return model, params


# ---------------------------------------------------------------------------
# Analytic losses
# ---------------------------------------------------------------------------

ANALYTIC_DEFAULTS = {
    "quadratic": {"dim": 1, "curvature": 1.0},
    "asymmetric-valley-1d": {"sharp": 50.0, "flat": 0.5},
    "sharp-flat-bimodal-1d": {
        "sharp_center": -1.0,
        "flat_center": 1.0,
        "sharp_width": 0.05,
        "flat_width": 1.0,
        "depth": 1.0,
    },
    "rosenbrock-2d": {"a": 1.0, "b": 100.0},
}


@dataclass(frozen=True)
class AnalyticLoss:
    kind: str
    shape: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        if self.kind == "quadratic":
            return int(self.shape["dim"])
        return 2 if self.kind == "rosenbrock-2d" else 1


def analytic_loss(kind, **shape) -> AnalyticLoss:
    if kind not in ANALYTIC_DEFAULTS:
        raise ConfigError(f"unknown analytic loss {kind!r}")
    unknown = set(shape) - set(ANALYTIC_DEFAULTS[kind])
    if unknown:
        raise ConfigError(f"{kind}: unknown shape parameters {sorted(unknown)}")
    return AnalyticLoss(kind, {**ANALYTIC_DEFAULTS[kind], **shape})


def analytic_eval(loss: AnalyticLoss, theta):
    """Closed-form value and exact gradient of ``loss`` at ``theta``."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.size != loss.dim:
        raise ShapeMismatchError(f"{loss.kind} is {loss.dim}-dimensional, got {theta.size}")
    s = loss.shape

    if loss.kind == "quadratic":
        c = s["curvature"]
        return 0.5 * c * float(theta @ theta), c * theta

    if loss.kind == "asymmetric-valley-1d":
        x = theta[0]
        c = s["sharp"] if x < 0 else s["flat"]
        return c * x * x, np.array([2.0 * c * x])

    if loss.kind == "sharp-flat-bimodal-1d":
        x = theta[0]
        ds = x - s["sharp_center"]
        df = x - s["flat_center"]
        gs = math.exp(-ds * ds / (2.0 * s["sharp_width"] ** 2))
        gf = math.exp(-df * df / (2.0 * s["flat_width"] ** 2))
        dgs = -gs * ds / s["sharp_width"] ** 2
        dgf = -gf * df / s["flat_width"] ** 2
        value = s["depth"] * (1.0 - gs) * (1.0 - gf)
        grad = s["depth"] * (-dgs * (1.0 - gf) - (1.0 - gs) * dgf)
        return value, np.array([grad])

    # rosenbrock-2d
    a, b = s["a"], s["b"]
    x, y = theta
    value = (a - x) ** 2 + b * (y - x * x) ** 2
    grad = np.array([-2.0 * (a - x) - 4.0 * b * x * (y - x * x), 2.0 * b * (y - x * x)])
    return value, grad


class AnalyticModel:
    """Presents an analytic loss through the network interface.

    Every example of a batch carries the same loss L(θ); the inputs are ignored, so a
    placeholder dataset only sets how many minibatches make up an epoch.
    """

    metric = "none"
    bn_layers = []

    def __init__(self, loss: AnalyticLoss):
        self.analytic = loss
        self.layout = Layout.from_shapes([("theta.value", (loss.dim,))])

    @property
    def spec(self) -> str:
        return self.analytic.kind

    def params(self, theta) -> ParameterVector:
        return ParameterVector(np.asarray(theta, dtype=np.float64).reshape(-1), self.layout)

    def predict(self, outputs):
        return outputs

    def run(self, params, inputs, targets, bn_state=None, need_grad=False) -> Pass:
        n = np.asarray(inputs).shape[0]
        if n == 0:
            raise ShapeMismatchError("empty batch")
        value, grad = analytic_eval(self.analytic, params.values)
        if not math.isfinite(value):
            raise NonFiniteError("forward")
        result = Pass(losses=np.full(n, value), outputs=np.zeros((n, 1)))
        if need_grad:
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError("backward")
            result.grad = grad
        return result

    def __repr__(self):
        return f"AnalyticModel({self.analytic.kind}, {self.analytic.shape})"


# ---------------------------------------------------------------------------
# Batch-norm statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchNormState:
    """Per-layer running (mean, variance), replaced wholesale by :func:`recompute_bn_stats`."""

    stats: dict = field(default_factory=dict)
    count: int = 0

    def __getitem__(self, name):
        return self.stats[name]

    def __len__(self):
        return len(self.stats)

    @property
    def is_empty(self) -> bool:
        return not self.stats


def recompute_bn_stats(model, params, train_data, split="train") -> BatchNormState:
    """Exact batch-norm statistics over the full ``split`` at frozen ``params``.

    One full-batch forward pass in batch mode: each layer normalizes with, and reports, the
    mean and variance of its pre-activations over the whole split.
    """
    indices = train_data.split_indices(split)
    if indices.size == 0:
        raise DataFormatError(f"cannot recompute batch-norm statistics on empty split {split!r}")
    if not model.bn_layers:
        return BatchNormState()
    result = model.run(params, train_data.inputs[indices], train_data.labels[indices])
    stats = {name: (mean.copy(), var.copy()) for name, (mean, var) in result.bn_stats.items()}
    return BatchNormState(stats, int(indices.size))


# ---------------------------------------------------------------------------
# Metrics and evaluation
# ---------------------------------------------------------------------------


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    return float(np.mean(predictions == labels))


def f1_macro(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    scores = []
    for cls in np.union1d(labels, predictions):
        tp = np.count_nonzero((predictions == cls) & (labels == cls))
        fp = np.count_nonzero((predictions == cls) & (labels != cls))
        fn = np.count_nonzero((predictions != cls) & (labels == cls))
        denom = 2 * tp + fp + fn
        scores.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def compute_metric(kind, predictions, labels) -> float:
    if kind == "accuracy":
        return accuracy(predictions, labels)
    if kind == "f1-macro":
        return f1_macro(predictions, labels)
    return float("nan")


@dataclass(frozen=True)
class Evaluation:
    loss: float
    metric: float
    nonfinite: bool = False


def evaluate(model, params, dataset, split, bn_state=None) -> Evaluation:
    """Mean loss and task metric of ``params`` on one split.

    Batch-norm statistics are recomputed from the training split unless ``bn_state`` is given.
    Non-finite losses are reported through the flag instead of raised.
    """
    indices = dataset.split_indices(split)
    if indices.size == 0:
        raise DataFormatError(f"split {split!r} is empty")
    try:
        if bn_state is None:
            bn_state = recompute_bn_stats(model, params, dataset)
        result = model.run(params, dataset.inputs[indices], dataset.labels[indices],
                           bn_state=bn_state if model.bn_layers else None)
    except NonFiniteError:
        return Evaluation(float("nan"), float("nan"), nonfinite=True)
    predictions = model.predict(result.outputs)
    metric = compute_metric(model.metric, predictions, dataset.labels[indices])
    return Evaluation(float(result.losses.mean()), metric)
