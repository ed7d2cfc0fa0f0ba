"""Flat parameter vectors, seeded random streams and reverse-mode gradients.

The differentiable op set is small and closed: dense (matmul + add), elementwise
nonlinearities, 2D convolution, batch normalization, global average pooling and the
two loss heads (softmax cross-entropy, squared error). A :class:`Network` is an ordered
list of these ops; its backward pass walks the same list in reverse, so there is no
general tape.

Everything runs in float64.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import LayoutMismatchError, NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
BN_EPSILON = 1e-5


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.offset + self.size

    @property
    def kind(self) -> str:
        # "fc1.weight" -> "weight"
        return self.name.rsplit(".", 1)[-1]


@dataclass(frozen=True)
class Layout:
    """Ordered, contiguous segment table covering ``[0, size)``."""

    segments: tuple

    def __post_init__(self):
        offset = 0
        seen = set()
        for segment in self.segments:
            if segment.offset != offset:
                raise LayoutMismatchError(
                    f"segment {segment.name!r} starts at {segment.offset}, expected {offset}"
                )
            if segment.name in seen:
                raise LayoutMismatchError(f"duplicate segment name {segment.name!r}")
            seen.add(segment.name)
            offset = segment.stop

    @classmethod
    def from_shapes(cls, named_shapes) -> "Layout":
        segments = []
        offset = 0
        for name, shape in named_shapes:
            segment = Segment(name, offset, tuple(int(dim) for dim in shape))
            segments.append(segment)
            offset = segment.stop
        return cls(tuple(segments))

    @property
    def size(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    @property
    def names(self) -> list:
        return [segment.name for segment in self.segments]

    def segment(self, name) -> Segment:
        for segment in self.segments:
            if segment.name == name:
                return segment
        raise KeyError(name)


def _frozen_copy(values, size=None) -> np.ndarray:
    array = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    if size is not None and array.size != size:
        raise ShapeMismatchError(f"expected {size} values, got {array.size}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Model parameters θ ∈ R^d plus the segment table describing layers and filters.

    Instances are values: every arithmetic op returns a new vector with the same layout.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_copy(self.values, self.layout.size))

    @classmethod
    def zeros(cls, layout: Layout) -> "ParameterVector":
        return cls(np.zeros(layout.size), layout)

    @property
    def size(self) -> int:
        return self.values.size

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(values, self.layout)

    def view(self, name) -> np.ndarray:
        segment = self.layout.segment(name)
        return self.values[segment.offset:segment.stop].reshape(segment.shape)

    def views(self) -> dict:
        return {
            segment.name: self.values[segment.offset:segment.stop].reshape(segment.shape)
            for segment in self.layout.segments
        }

    def check_layout(self, other) -> None:
        if self.layout != other.layout:
            raise LayoutMismatchError(
                f"layouts differ: {self.layout.names} vs {other.layout.names}"
            )

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def dot(self, other) -> float:
        self.check_layout(other)
        return float(self.values @ other.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __add__(self, other):
        return linear_combination(1.0, self, 1.0, other)

    def __sub__(self, other):
        return linear_combination(1.0, self, -1.0, other)

    def __mul__(self, scalar):
        return ParameterVector(float(scalar) * self.values, self.layout)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __repr__(self):
        return f"ParameterVector(d={self.size}, segments={self.layout.names})"


def linear_combination(a, p: ParameterVector, b, q: ParameterVector) -> ParameterVector:
    """Return ``a·p + b·q``; both vectors must share a layout."""
    p.check_layout(q)
    return ParameterVector(float(a) * p.values + float(b) * q.values, p.layout)


def parameter_distance(p: ParameterVector, q: ParameterVector) -> float:
    p.check_layout(q)
    return float(np.linalg.norm(p.values - q.values))


@dataclass(frozen=True, eq=False)
class Gradient:
    """Minibatch-mean gradient, laid out like the parameters it differentiates."""

    values: np.ndarray
    layout: Layout
    batch_size: int
    loss: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_copy(self.values, self.layout.size))

    def as_vector(self) -> ParameterVector:
        return ParameterVector(self.values, self.layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def plus(self, noise) -> "Gradient":
        return Gradient(self.values + noise, self.layout, self.batch_size, self.loss)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """A labelled Philox stream.

    Philox is counter-based, so identical ``(seed, stream_id)`` pairs give identical draws on
    every platform. ``child`` derives independent streams by hashing a label into a new id.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & MASK64)
        object.__setattr__(self, "stream_id", int(self.stream_id) & MASK64)

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, label) -> "RngStream":
        digest = hashlib.blake2b(
            f"{self.stream_id}/{label}".encode("utf-8"), digest_size=8
        ).digest()
        return RngStream(self.seed, int.from_bytes(digest, "little"))


@dataclass
class EvalCounter:
    """Counts forward and gradient evaluations of a single run."""

    forward_evals: int = 0
    gradient_evals: int = 0


# ---------------------------------------------------------------------------
# Op set
# ---------------------------------------------------------------------------


class Dense:
    def __init__(self, name, fan_in, fan_out):
        self.name = name
        self.fan_in = fan_in
        self.fan_out = fan_out

    def param_shapes(self):
        return [("weight", (self.fan_out, self.fan_in)), ("bias", (self.fan_out,))]

    def forward(self, x, p, stats=None):
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise ShapeMismatchError(
                f"{self.name}: expected (*, {self.fan_in}) inputs, got {x.shape}"
            )
        return x @ p["weight"].T + p["bias"], x

    def backward(self, dout, cache, p):
        x = cache
        return dout @ p["weight"], {"weight": dout.T @ x, "bias": dout.sum(axis=0)}


class ReLU:
    def __init__(self, name):
        self.name = name

    def param_shapes(self):
        return []

    def forward(self, x, p, stats=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, cache, p):
        return dout * cache, {}


class Tanh:
    def __init__(self, name):
        self.name = name

    def param_shapes(self):
        return []

    def forward(self, x, p, stats=None):
        out = np.tanh(x)
        return out, out

    def backward(self, dout, cache, p):
        return dout * (1.0 - cache * cache), {}


class Reshape:
    """Reshape flat example rows into ``shape`` (e.g. single-channel images)."""

    def __init__(self, name, shape):
        self.name = name
        self.shape = tuple(shape)

    def param_shapes(self):
        return []

    def forward(self, x, p, stats=None):
        expected = int(np.prod(self.shape))
        if x.ndim != 2 or x.shape[1] != expected:
            raise ShapeMismatchError(
                f"{self.name}: expected (*, {expected}) inputs, got {x.shape}"
            )
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, dout, cache, p):
        return dout.reshape(cache), {}


class Conv2d:
    """Stride-1, same-padded 2D convolution over NCHW inputs."""

    def __init__(self, name, in_channels, out_channels, kernel=3):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.pad = kernel // 2

    def param_shapes(self):
        k = self.kernel
        return [
            ("weight", (self.out_channels, self.in_channels, k, k)),
            ("bias", (self.out_channels,)),
        ]

    def forward(self, x, p, stats=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"{self.name}: expected (*, {self.in_channels}, H, W) inputs, got {x.shape}"
            )
        pad = self.pad
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        windows = sliding_window_view(padded, (self.kernel, self.kernel), axis=(2, 3))
        # windows: (N, C, H, W, k, k)
        out = np.tensordot(windows, p["weight"], axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + p["bias"][None, :, None, None]
        return out, (x.shape, windows)

    def backward(self, dout, cache, p):
        shape, windows = cache
        _, _, height, width = shape
        weight = p["weight"]
        grad_weight = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_bias = dout.sum(axis=(0, 2, 3))
        pad = self.pad
        grad_padded = np.zeros((shape[0], shape[1], height + 2 * pad, width + 2 * pad))
        for i in range(self.kernel):
            for j in range(self.kernel):
                grad_padded[:, :, i:i + height, j:j + width] += np.einsum(
                    "nfhw,fc->nchw", dout, weight[:, :, i, j]
                )
        grad_x = grad_padded[:, :, pad:pad + height, pad:pad + width]
        return grad_x, {"weight": grad_weight, "bias": grad_bias}


@dataclass
class _NormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    batch_mode: bool


class BatchNorm:
    """Batch normalization over the feature/channel axis (axis 1).

    Without ``stats`` the op normalizes with the batch's own mean and (biased) variance and
    differentiates through them; with ``stats`` it uses the given running statistics.
    """

    def __init__(self, name, features):
        self.name = name
        self.features = features

    def param_shapes(self):
        return [("gamma", (self.features,)), ("beta", (self.features,))]

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _broadcast(v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x, p, stats=None):
        if x.ndim not in (2, 4) or x.shape[1] != self.features:
            raise ShapeMismatchError(
                f"{self.name}: expected {self.features} features on axis 1, got {x.shape}"
            )
        axes = self._axes(x)
        if stats is None:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            mean, var = stats
        inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
        xhat = (x - self._broadcast(mean, x.ndim)) * self._broadcast(inv_std, x.ndim)
        out = self._broadcast(p["gamma"], x.ndim) * xhat + self._broadcast(p["beta"], x.ndim)
        return out, _NormCache(xhat, inv_std, mean, var, stats is None)

    def backward(self, dout, cache, p):
        axes = self._axes(dout)
        ndim = dout.ndim
        grad_gamma = (dout * cache.xhat).sum(axis=axes)
        grad_beta = dout.sum(axis=axes)
        dxhat = dout * self._broadcast(p["gamma"], ndim)
        inv_std = self._broadcast(cache.inv_std, ndim)
        if not cache.batch_mode:
            return dxhat * inv_std, {"gamma": grad_gamma, "beta": grad_beta}
        count = dout.size // dout.shape[1]
        sum_dxhat = self._broadcast(dxhat.sum(axis=axes), ndim)
        sum_dxhat_xhat = self._broadcast((dxhat * cache.xhat).sum(axis=axes), ndim)
        grad_x = inv_std / count * (count * dxhat - sum_dxhat - cache.xhat * sum_dxhat_xhat)
        return grad_x, {"gamma": grad_gamma, "beta": grad_beta}


class GlobalAvgPool:
    def __init__(self, name):
        self.name = name

    def param_shapes(self):
        return []

    def forward(self, x, p, stats=None):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dout, cache, p):
        n, c, h, w = cache
        return np.broadcast_to(dout[:, :, None, None] / (h * w), cache).copy(), {}


class SoftmaxCrossEntropy:
    """Per-example cross-entropy of softmax(logits) against integer labels."""

    classifies = True

    def forward(self, logits, targets):
        labels = np.asarray(targets)
        if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
            raise ShapeMismatchError(f"expected {logits.shape[0]} integer labels")
        labels = labels.astype(np.int64)
        if labels.min() < 0 or labels.max() >= logits.shape[1]:
            raise ShapeMismatchError(
                f"labels must lie in [0, {logits.shape[1]}), got [{labels.min()}, {labels.max()}]"
            )
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(logits.shape[0])
        losses = log_norm - shifted[rows, labels]
        probs = np.exp(shifted - log_norm[:, None])
        dlogits = probs
        dlogits[rows, labels] -= 1.0
        return losses, dlogits

    @staticmethod
    def predict(outputs):
        return outputs.argmax(axis=1)


class SquaredError:
    """Per-example ½‖output − target‖²."""

    classifies = False

    def forward(self, outputs, targets):
        y = np.asarray(targets, dtype=np.float64).reshape(outputs.shape[0], -1)
        if y.shape != outputs.shape:
            raise ShapeMismatchError(f"targets {y.shape} do not match outputs {outputs.shape}")
        residual = outputs - y
        return 0.5 * (residual * residual).sum(axis=1), residual

    @staticmethod
    def predict(outputs):
        return outputs


# ---------------------------------------------------------------------------
# Networks, forward and gradient
# ---------------------------------------------------------------------------


@dataclass
class Pass:
    losses: np.ndarray
    outputs: np.ndarray
    grad: np.ndarray = None
    bn_stats: dict = field(default_factory=dict)


class Network:
    """An ordered op list followed by a loss head, with a flat parameter layout."""

    def __init__(self, layers, loss, input_dim):
        self.layers = list(layers)
        self.loss = loss
        self.input_dim = int(input_dim)
        self.layout = Layout.from_shapes(
            (f"{layer.name}.{suffix}", shape)
            for layer in self.layers
            for suffix, shape in layer.param_shapes()
        )

    @property
    def bn_layers(self) -> list:
        return [layer.name for layer in self.layers if isinstance(layer, BatchNorm)]

    def predict(self, outputs):
        return self.loss.predict(outputs)

    def run(self, params, inputs, targets, bn_state=None, need_grad=False) -> Pass:
        """Forward pass (and optionally the mean-loss gradient) on one batch.

        ``bn_state`` maps batch-norm layer names to ``(mean, var)``; when absent each
        batch-norm layer uses the batch's own statistics.
        """
        if self.layout != params.layout:
            raise LayoutMismatchError("parameters were not built for this network")
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] != self.input_dim:
            raise ShapeMismatchError(
                f"expected a non-empty (N, {self.input_dim}) batch, got {x.shape}"
            )
        views = params.views()
        caches = []
        bn_stats = {}
        for layer in self.layers:
            layer_params = {
                suffix: views[f"{layer.name}.{suffix}"] for suffix, _ in layer.param_shapes()
            }
            stats = None
            if bn_state is not None and isinstance(layer, BatchNorm):
                stats = bn_state[layer.name]
            x, cache = layer.forward(x, layer_params, stats)
            if isinstance(layer, BatchNorm) and stats is None:
                bn_stats[layer.name] = (cache.mean, cache.var)
            caches.append((layer, layer_params, cache))

        losses, dout = self.loss.forward(x, targets)
        if not np.all(np.isfinite(losses)):
            raise NonFiniteError("forward", f"{np.count_nonzero(~np.isfinite(losses))} losses")
        result = Pass(losses=losses, outputs=x, bn_stats=bn_stats)
        if not need_grad:
            return result

        grad = np.zeros(self.layout.size)
        delta = dout / losses.shape[0]
        for layer, layer_params, cache in reversed(caches):
            delta, grads = layer.backward(delta, cache, layer_params)
            for suffix, value in grads.items():
                segment = self.layout.segment(f"{layer.name}.{suffix}")
                grad[segment.offset:segment.stop] = value.reshape(-1)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("backward")
        result.grad = grad
        return result


@dataclass
class ForwardResult:
    losses: np.ndarray
    outputs: np.ndarray
    predictions: np.ndarray

    @property
    def mean_loss(self) -> float:
        return float(self.losses.mean())


def forward(model, params, batch, bn_state=None, counter=None) -> ForwardResult:
    """Per-example losses and predictions of ``model`` at ``params`` on ``batch``."""
    if counter is not None:
        counter.forward_evals += 1
    result = model.run(params, batch.inputs, batch.targets, bn_state=bn_state)
    return ForwardResult(result.losses, result.outputs, model.predict(result.outputs))


def gradient(model, params, batch, counter=None) -> Gradient:
    """(1/|B|) Σ ∇ℓ(θ; x_i) over the batch, with batch-norm layers in batch mode."""
    if counter is not None:
        counter.gradient_evals += 1
    result = model.run(params, batch.inputs, batch.targets, need_grad=True)
    return Gradient(
        result.grad, params.layout, batch_size=int(result.losses.shape[0]),
        loss=float(result.losses.mean()),
    )
