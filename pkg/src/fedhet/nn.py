"""Small encoder-decoder MLPs with exact analytic gradients.

A model is a flat float64 vector plus a layout that names per-layer weight
and bias spans and assigns each to a role: the first hidden layer is the
encoder, any further hidden layers the decoder body, and the final affine
layer the decoder output.  The roles give every federated method's
shared/personalized split a concrete home; see :mod:`fedhet.federated`.

Hidden layers use tanh or relu; the output layer is affine.  The penultimate
activation (last hidden layer) doubles as the datapoint's task embedding.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError, ParseError, ShapeError
from .rng import RngStream

ENCODER = "encoder"
DECODER_BODY = "decoder-body"
DECODER_OUTPUT = "decoder-output"


class LossKind(enum.Enum):
    L1 = "l1"
    MSE = "mse"
    CROSS_ENTROPY = "cross-entropy"


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: tuple[int, ...]
    activation: str = "tanh"
    output_dim: int = 1

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise InvalidParameterError("input and output dims must be >= 1")
        if len(self.hidden) < 1 or any(h < 1 for h in self.hidden):
            raise InvalidParameterError("need at least one hidden layer of width >= 1")
        if self.activation not in ("tanh", "relu"):
            raise InvalidParameterError(f"unknown activation {self.activation!r}")

    @property
    def penultimate_width(self) -> int:
        return self.hidden[-1]

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per affine layer, hidden layers then output."""
        widths = [self.input_dim, *self.hidden, self.output_dim]
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    stop: int
    shape: tuple[int, ...]
    role: str


def build_layout(arch: Architecture) -> tuple[Segment, ...]:
    segments = []
    offset = 0
    dims = arch.layer_dims
    last = len(dims) - 1
    for i, (fan_in, fan_out) in enumerate(dims):
        if i == 0:
            role = ENCODER
        elif i == last:
            role = DECODER_OUTPUT
        else:
            role = DECODER_BODY
        for suffix, shape in (("w", (fan_out, fan_in)), ("b", (fan_out,))):
            size = int(np.prod(shape))
            segments.append(Segment(f"layer{i}.{suffix}", offset, offset + size, shape, role))
            offset += size
    return tuple(segments)


def layout_size(layout: tuple[Segment, ...]) -> int:
    return layout[-1].stop


@dataclass
class ModelParams:
    """Flat parameter vector with a named, role-tagged layout."""

    values: np.ndarray
    layout: tuple[Segment, ...]

    def __post_init__(self):
        if self.values.shape != (layout_size(self.layout),):
            raise ShapeError("value vector does not match layout size")

    def clone(self) -> "ModelParams":
        return ModelParams(self.values.copy(), self.layout)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(np.zeros_like(self.values), self.layout)

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.start : seg.stop].reshape(seg.shape)
        raise KeyError(name)

    def role_ranges(self, *roles: str) -> list[tuple[int, int]]:
        return [(s.start, s.stop) for s in self.layout if s.role in roles]


def role_mask(layout: tuple[Segment, ...], *roles: str) -> np.ndarray:
    mask = np.zeros(layout_size(layout), dtype=bool)
    for seg in layout:
        if seg.role in roles:
            mask[seg.start : seg.stop] = True
    return mask


def same_layout(a: ModelParams, b: ModelParams) -> bool:
    return a.layout == b.layout


def init_params(arch: Architecture, rng: RngStream) -> ModelParams:
    """Gaussian weights scaled by 1/sqrt(fan_in); zero biases."""
    layout = build_layout(arch)
    values = np.zeros(layout_size(layout))
    for seg in layout:
        if seg.name.endswith(".w"):
            fan_in = seg.shape[1]
            values[seg.start : seg.stop] = (
                rng.normals(seg.shape) / math.sqrt(fan_in)
            ).ravel()
    return ModelParams(values, layout)


def _layer_views(params: ModelParams) -> list[tuple[np.ndarray, np.ndarray]]:
    segs = params.layout
    return [
        (
            params.values[segs[i].start : segs[i].stop].reshape(segs[i].shape),
            params.values[segs[i + 1].start : segs[i + 1].stop],
        )
        for i in range(0, len(segs), 2)
    ]


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(z) if activation == "tanh" else np.maximum(z, 0.0)


def forward(params: ModelParams, arch: Architecture, features: np.ndarray):
    """Batch forward pass; returns (outputs, penultimate activations).

    Accepts a single feature vector or an (n, d) batch and returns arrays of
    matching leading shape.
    """
    x = np.asarray(features, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != arch.input_dim:
        raise ShapeError(f"expected {arch.input_dim} features, got {x.shape[1]}")
    layers = _layer_views(params)
    h = x
    penult = None
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        if i < len(layers) - 1:
            h = _activate(z, arch.activation)
            penult = h
        else:
            out = z
    if single:
        return out[0], penult[0]
    return out, penult


def loss(kind: LossKind, output: np.ndarray, target) -> float:
    """Per-point loss; cross-entropy expects logits and an integer target."""
    out = np.asarray(output, dtype=float)
    if not np.all(np.isfinite(out)):
        raise InvalidParameterError("non-finite model output")
    if kind is LossKind.CROSS_ENTROPY:
        t = int(target)
        if not 0 <= t < out.size:
            raise InvalidParameterError("class index out of range")
        return float(_logsumexp(out) - out[t])
    tgt = np.asarray(target, dtype=float)
    if tgt.shape != out.shape:
        raise ShapeError("output/target shape mismatch")
    if kind is LossKind.L1:
        return float(np.mean(np.abs(out - tgt)))
    return float(np.mean((out - tgt) ** 2))


def loss_gradient(kind: LossKind, output: np.ndarray, target) -> np.ndarray:
    """d loss / d output for one point."""
    out = np.asarray(output, dtype=float)
    if kind is LossKind.CROSS_ENTROPY:
        t = int(target)
        grad = _softmax(out)
        grad[t] -= 1.0
        return grad
    tgt = np.asarray(target, dtype=float)
    if tgt.shape != out.shape:
        raise ShapeError("output/target shape mismatch")
    if kind is LossKind.L1:
        return np.sign(out - tgt) / out.size
    return 2.0 * (out - tgt) / out.size


def _logsumexp(z: np.ndarray) -> float:
    m = float(np.max(z))
    return m + math.log(float(np.sum(np.exp(z - m))))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def batch_loss(
    kind: LossKind, outputs: np.ndarray, targets: np.ndarray
) -> float:
    """Mean per-point loss over a batch of raw outputs."""
    if kind is LossKind.CROSS_ENTROPY:
        idx = targets.astype(np.int64).reshape(-1)
        m = np.max(outputs, axis=1)
        lse = m + np.log(np.exp(outputs - m[:, None]).sum(axis=1))
        return float(np.mean(lse - outputs[np.arange(len(idx)), idx]))
    if kind is LossKind.L1:
        return float(np.mean(np.mean(np.abs(outputs - targets), axis=1)))
    return float(np.mean(np.mean((outputs - targets) ** 2, axis=1)))


def _batch_output_grad(
    kind: LossKind, outputs: np.ndarray, targets: np.ndarray
) -> np.ndarray:
    """d(mean batch loss)/d outputs, batch factor folded in."""
    n = outputs.shape[0]
    if kind is LossKind.CROSS_ENTROPY:
        idx = targets.astype(np.int64).reshape(-1)
        grad = _softmax(outputs)
        grad[np.arange(n), idx] -= 1.0
        return grad / n
    if kind is LossKind.L1:
        return np.sign(outputs - targets) / (outputs.shape[1] * n)
    return 2.0 * (outputs - targets) / (outputs.shape[1] * n)


def backward(
    params: ModelParams,
    arch: Architecture,
    features: np.ndarray,
    targets: np.ndarray,
    kind: LossKind,
    grad_out: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Gradient of the mean batch loss w.r.t. every parameter.

    Returns (flat gradient, batch loss).  ``grad_out`` may supply a
    preallocated buffer to avoid churn in tight training loops.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
        targets = np.asarray(targets)[None, ...]
    if x.shape[0] == 0:
        raise InvalidParameterError("batch must be non-empty")
    if x.shape[1] != arch.input_dim:
        raise ShapeError(f"expected {arch.input_dim} features, got {x.shape[1]}")

    layers = _layer_views(params)
    activations = [x]
    pre = []
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        pre.append(z)
        if i < len(layers) - 1:
            h = _activate(z, arch.activation)
            activations.append(h)
    outputs = pre[-1]
    value = batch_loss(kind, outputs, targets)

    if grad_out is None:
        grad_out = np.zeros_like(params.values)
    else:
        grad_out.fill(0.0)
    grad = ModelParams(grad_out, params.layout)
    gviews = _layer_views(grad)

    delta = _batch_output_grad(kind, outputs, targets)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = gviews[i]
        np.matmul(delta.T, activations[i], out=gw)
        np.sum(delta, axis=0, out=gb)
        if i > 0:
            back = delta @ w
            if arch.activation == "tanh":
                delta = back * (1.0 - activations[i] ** 2)
            else:
                delta = back * (pre[i - 1] > 0)
    return grad_out, value


def sgd_step(params: ModelParams, gradient: np.ndarray, lr: float) -> ModelParams:
    """params - lr * gradient, elementwise, as a new ModelParams."""
    if lr < 0:
        raise InvalidParameterError("learning rate must be >= 0")
    g = gradient.values if isinstance(gradient, ModelParams) else np.asarray(gradient)
    if g.shape != params.values.shape:
        raise ShapeError("gradient does not match parameter layout")
    return ModelParams(params.values - lr * g, params.layout)


# -- checkpoints --------------------------------------------------------------


def save_params(params: ModelParams, arch: Architecture, path) -> None:
    """Delimited-text checkpoint, round-trip exact to 17 significant digits."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(
            "arch,%d,%s,%s,%d\n"
            % (arch.input_dim, "-".join(map(str, arch.hidden)), arch.activation, arch.output_dim)
        )
        fh.write(
            "segments," + ";".join(f"{s.name}:{s.start}:{s.stop}:{s.role}" for s in params.layout) + "\n"
        )
        for v in params.values:
            fh.write("%.17g\n" % v)


def load_params(path) -> tuple[ModelParams, Architecture]:
    with Path(path).open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if len(lines) < 3 or not lines[0].startswith("arch,"):
        raise ParseError("malformed checkpoint header", line=1)
    _, d, hidden, act, m = lines[0].split(",")
    arch = Architecture(int(d), tuple(int(h) for h in hidden.split("-")), act, int(m))
    layout = build_layout(arch)
    expected = ";".join(f"{s.name}:{s.start}:{s.stop}:{s.role}" for s in layout)
    if lines[1] != "segments," + expected:
        raise ParseError("checkpoint layout does not match architecture", line=2)
    values = np.array([float(v) for v in lines[2:]], dtype=float)
    if values.shape[0] != layout_size(layout):
        raise ParseError(f"expected {layout_size(layout)} values, found {values.shape[0]}")
    return ModelParams(values, layout), arch
