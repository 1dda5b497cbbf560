"""Deterministic forward-pass engine for sequential CNNs in binary32.

All activations and weights are IEEE-754 single precision.  Every reduction
in this module runs in an explicitly coded order so that results are
bit-reproducible and can be mirrored by a scalar reference implementation:

* Conv2D: accumulator starts at the bias, then terms are added in kernel
  row-major order with the input channel varying fastest (ki, kj, cin).
* Dense: accumulator starts at the bias, then input features in ascending
  index order.
* Softmax: max-subtracted, exponential sum accumulated in ascending class
  order.

Max-based operations (ReLU, MaxPool2D) propagate NaN: a corrupted value
must not be silently repaired by comparison semantics.

All kernels are batch-first internally; a leading sample axis is prepended
for the single-tensor entry points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import ClassVar, Union

import numpy as np

from .errors import ValidationError

Shape = tuple[int, ...]

F32 = np.float32

#: Prediction value used when every class score is NaN.  Counted as a
#: misclassification by every metric.
INVALID_PREDICTION = -1


def as_f32(values, shape=None) -> np.ndarray:
    """Return a C-contiguous float32 array, optionally reshaped."""
    arr = np.ascontiguousarray(values, dtype=F32)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=F32)
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# Layer specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Conv2D:
    kind: ClassVar[str] = "Conv2D"
    kernel: np.ndarray  # (kh, kw, cin, cout)
    bias: np.ndarray  # (cout,)
    stride: tuple[int, int] = (1, 1)
    padding: str = "valid"
    name: str = "conv2d"

    def __post_init__(self):
        object.__setattr__(self, "kernel", _freeze(self.kernel))
        object.__setattr__(self, "bias", _freeze(self.bias))
        if self.kernel.ndim != 4:
            raise ValidationError(f"layer {self.name}: kernel must be rank 4 (kh, kw, cin, cout)")
        if self.bias.shape != (self.kernel.shape[3],):
            raise ValidationError(f"layer {self.name}: bias length must equal output channels")
        if self.padding not in ("valid", "same"):
            raise ValidationError(f"layer {self.name}: padding must be 'valid' or 'same'")
        if min(self.stride) < 1:
            raise ValidationError(f"layer {self.name}: stride must be positive")

    def out_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3:
            raise ValidationError(f"layer {self.name}: expects rank-3 input (h, w, c), got {in_shape}")
        kh, kw, cin, cout = self.kernel.shape
        h, w, c = in_shape
        if c != cin:
            raise ValidationError(
                f"layer {self.name}: input has {c} channels, kernel expects {cin}"
            )
        sh, sw = self.stride
        if self.padding == "same":
            oh = -(-h // sh)
            ow = -(-w // sw)
        else:
            if h < kh or w < kw:
                raise ValidationError(f"layer {self.name}: input {h}x{w} smaller than kernel {kh}x{kw}")
            oh = (h - kh) // sh + 1
            ow = (w - kw) // sw + 1
        return (oh, ow, cout)


@dataclass(frozen=True, eq=False)
class MaxPool2D:
    kind: ClassVar[str] = "MaxPool2D"
    window: tuple[int, int] = (2, 2)
    stride: tuple[int, int] = (2, 2)
    name: str = "maxpool2d"

    def __post_init__(self):
        if min(self.window) < 1 or min(self.stride) < 1:
            raise ValidationError(f"layer {self.name}: window and stride must be positive")

    def out_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3:
            raise ValidationError(f"layer {self.name}: expects rank-3 input (h, w, c), got {in_shape}")
        h, w, c = in_shape
        ph, pw = self.window
        sh, sw = self.stride
        if h < ph or w < pw:
            raise ValidationError(f"layer {self.name}: input {h}x{w} smaller than window {ph}x{pw}")
        return ((h - ph) // sh + 1, (w - pw) // sw + 1, c)


@dataclass(frozen=True, eq=False)
class Dense:
    kind: ClassVar[str] = "Dense"
    weights: np.ndarray  # (n_in, n_out)
    bias: np.ndarray  # (n_out,)
    activation: str | None = None  # None or "softmax" (fused, applied after the affine map)
    name: str = "dense"

    def __post_init__(self):
        object.__setattr__(self, "weights", _freeze(self.weights))
        object.__setattr__(self, "bias", _freeze(self.bias))
        if self.weights.ndim != 2:
            raise ValidationError(f"layer {self.name}: weights must be rank 2 (in, out)")
        if self.bias.shape != (self.weights.shape[1],):
            raise ValidationError(f"layer {self.name}: bias length must equal output size")
        if self.activation not in (None, "softmax"):
            raise ValidationError(f"layer {self.name}: unsupported activation {self.activation!r}")

    def out_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 1 or in_shape[0] != self.weights.shape[0]:
            raise ValidationError(
                f"layer {self.name}: expects rank-1 input of {self.weights.shape[0]}, got {in_shape}"
            )
        return (self.weights.shape[1],)


@dataclass(frozen=True, eq=False)
class ReLU:
    kind: ClassVar[str] = "ReLU"
    name: str = "relu"

    def out_shape(self, in_shape: Shape) -> Shape:
        return in_shape


@dataclass(frozen=True, eq=False)
class PReLU:
    kind: ClassVar[str] = "PReLU"
    alpha: np.ndarray  # broadcastable to the layer input shape
    name: str = "prelu"

    def __post_init__(self):
        object.__setattr__(self, "alpha", _freeze(self.alpha))

    def out_shape(self, in_shape: Shape) -> Shape:
        try:
            broadcast = np.broadcast_shapes(self.alpha.shape, in_shape)
        except ValueError:
            broadcast = None
        if broadcast != tuple(in_shape):
            raise ValidationError(
                f"layer {self.name}: alpha shape {self.alpha.shape} not broadcastable to {in_shape}"
            )
        return in_shape


@dataclass(frozen=True, eq=False)
class Softmax:
    kind: ClassVar[str] = "Softmax"
    name: str = "softmax"

    def out_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 1:
            raise ValidationError(f"layer {self.name}: expects rank-1 input, got {in_shape}")
        return in_shape


@dataclass(frozen=True, eq=False)
class Flatten:
    kind: ClassVar[str] = "Flatten"
    name: str = "flatten"

    def out_shape(self, in_shape: Shape) -> Shape:
        return (int(np.prod(in_shape)),)


@dataclass(frozen=True, eq=False)
class Dropout:
    kind: ClassVar[str] = "Dropout"
    rate: float = 0.0  # recorded only; inference is a pass-through
    name: str = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValidationError(f"layer {self.name}: dropout rate must be in [0, 1)")

    def out_shape(self, in_shape: Shape) -> Shape:
        return in_shape


Layer = Union[Conv2D, MaxPool2D, Dense, ReLU, PReLU, Softmax, Flatten, Dropout]

LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, MaxPool2D, Dense, ReLU, PReLU, Softmax, Flatten, Dropout)}


@dataclass(eq=False)
class Model:
    """A shape-checked sequential stack of layers."""

    input_shape: Shape
    layers: list[Layer]
    output_shapes: list[Shape] = field(init=False)

    def __post_init__(self):
        self.input_shape = tuple(int(e) for e in self.input_shape)
        if not self.input_shape or min(self.input_shape) < 1:
            raise ValidationError(f"model input shape must have positive extents, got {self.input_shape}")
        if not self.layers:
            raise ValidationError("model must contain at least one layer")
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ValidationError as exc:
                producer = f" fed by {self.layers[i - 1].name}" if i else ""
                raise ValidationError(f"layer {i} ({layer.name}){producer}: {exc}") from None
            shapes.append(shape)
        if len(shapes[-1]) != 1:
            raise ValidationError(
                f"final layer {self.layers[-1].name} must produce rank-1 class scores, got {shapes[-1]}"
            )
        self.output_shapes = shapes

    @property
    def class_count(self) -> int:
        return self.output_shapes[-1][0]

    def input_shape_of(self, index: int) -> Shape:
        return self.input_shape if index == 0 else self.output_shapes[index - 1]


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


#: Arithmetic on corrupted tensors legitimately overflows or produces
#: NaN/Inf; those values are data here, not errors.
_quiet = np.errstate(over="ignore", invalid="ignore", under="ignore", divide="ignore")


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x); NaN inputs yield NaN outputs."""
    return np.maximum(x, F32(0.0))


@_quiet
def prelu(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """relu(x) + alpha * (0.5 * (x - |x|)).

    The dataflow is fixed: Sub, then the constant multiply, then the alpha
    multiply, with the two branches combined by a final Add.  The micro-op
    expansion relies on matching this order bit-for-bit.
    """
    neg = x - np.abs(x)
    neg = F32(0.5) * neg
    neg = np.asarray(alpha, dtype=F32) * neg
    return relu(x) + neg


@_quiet
def softmax(x: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis; NaN rows stay NaN, never raise."""
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    total = e[..., 0].copy()
    for i in range(1, e.shape[-1]):
        np.add(total, e[..., i], out=total)
    return e / total[..., None]


def flatten(x: np.ndarray) -> np.ndarray:
    """Rank-1 view of the row-major data; bit-identical sequence."""
    return np.ascontiguousarray(x).reshape(-1)


def dropout_inference(x: np.ndarray) -> np.ndarray:
    """Inference-mode dropout: bit-identical pass-through."""
    return x


# ---------------------------------------------------------------------------
# Batched layer kernels (leading sample axis)
# ---------------------------------------------------------------------------


def _conv2d_batch(layer: Conv2D, x: np.ndarray) -> np.ndarray:
    kh, kw, cin, cout = layer.kernel.shape
    sh, sw = layer.stride
    b, h, w, _ = x.shape
    oh, ow, _ = layer.out_shape(x.shape[1:])
    if layer.padding == "same":
        pad_h = max((oh - 1) * sh + kh - h, 0)
        pad_w = max((ow - 1) * sw + kw - w, 0)
        # zero padding, split floor-left / ceil-right
        x = np.pad(
            x,
            ((0, 0), (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2), (0, 0)),
            mode="constant",
        )
    acc = np.empty((b, oh, ow, cout), dtype=F32)
    acc[...] = layer.bias
    term = np.empty_like(acc)
    for ki in range(kh):
        for kj in range(kw):
            for c in range(cin):
                patch = x[:, ki : ki + (oh - 1) * sh + 1 : sh, kj : kj + (ow - 1) * sw + 1 : sw, c]
                np.multiply(patch[..., None], layer.kernel[ki, kj, c], out=term)
                np.add(acc, term, out=acc)
    return acc


def _maxpool_batch(layer: MaxPool2D, x: np.ndarray) -> np.ndarray:
    ph, pw = layer.window
    sh, sw = layer.stride
    oh, ow, _ = layer.out_shape(x.shape[1:])
    acc = None
    for wi in range(ph):
        for wj in range(pw):
            window = x[:, wi : wi + (oh - 1) * sh + 1 : sh, wj : wj + (ow - 1) * sw + 1 : sw, :]
            if acc is None:
                acc = window.copy()
            else:
                np.maximum(acc, window, out=acc)  # propagates NaN
    return acc


def _dense_batch(layer: Dense, x: np.ndarray) -> np.ndarray:
    n_in, n_out = layer.weights.shape
    acc = np.empty((x.shape[0], n_out), dtype=F32)
    acc[...] = layer.bias
    term = np.empty_like(acc)
    for i in range(n_in):
        np.multiply(x[:, i : i + 1], layer.weights[i], out=term)
        np.add(acc, term, out=acc)
    if layer.activation == "softmax":
        acc = softmax(acc)
    return acc


@_quiet
def forward_layer_batch(layer: Layer, x: np.ndarray) -> np.ndarray:
    """Apply one layer to a batch shaped (samples, *layer input shape)."""
    if isinstance(layer, Conv2D):
        return _conv2d_batch(layer, x)
    if isinstance(layer, MaxPool2D):
        return _maxpool_batch(layer, x)
    if isinstance(layer, Dense):
        return _dense_batch(layer, x)
    if isinstance(layer, ReLU):
        return relu(x)
    if isinstance(layer, PReLU):
        return prelu(x, layer.alpha)
    if isinstance(layer, Softmax):
        return softmax(x)
    if isinstance(layer, Flatten):
        return np.ascontiguousarray(x).reshape(x.shape[0], -1)
    if isinstance(layer, Dropout):
        return x
    raise ValidationError(f"unknown layer type {type(layer).__name__}")


def forward_layer(layer: Layer, x: np.ndarray) -> np.ndarray:
    """Apply one layer to a single tensor, validating the input shape."""
    x = np.asarray(x, dtype=F32)
    layer.out_shape(x.shape)  # raises with the layer name on mismatch
    return forward_layer_batch(layer, x[None])[0]


def forward_batch(model: Model, x: np.ndarray, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Run layers [start, stop) over a batch; returns the last output."""
    stop = len(model.layers) if stop is None else stop
    expected = model.input_shape_of(start)
    if x.shape[1:] != expected:
        raise ValidationError(
            f"batch shape {x.shape[1:]} does not match layer {start} input {expected}"
        )
    out = np.asarray(x, dtype=F32)
    for layer in model.layers[start:stop]:
        out = forward_layer_batch(layer, out)
    return out


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Full forward pass for one input tensor; deterministic."""
    x = np.asarray(x, dtype=F32)
    if x.shape != model.input_shape:
        raise ValidationError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return forward_batch(model, x[None])[0]


def head_batch(model: Model, layer_index: int, x: np.ndarray) -> np.ndarray:
    """Outputs of layer `layer_index` (inclusive) for a batch of inputs."""
    if not 0 <= layer_index < len(model.layers):
        raise ValidationError(f"layer index {layer_index} out of range for {len(model.layers)} layers")
    return forward_batch(model, x, start=0, stop=layer_index + 1)


def tail_scores_batch(model: Model, layer_index: int, activations: np.ndarray) -> np.ndarray:
    """Class scores from running layers after `layer_index` on cached activations."""
    if not 0 <= layer_index < len(model.layers):
        raise ValidationError(f"layer index {layer_index} out of range for {len(model.layers)} layers")
    expected = model.output_shapes[layer_index]
    if activations.shape[1:] != expected:
        raise ValidationError(
            f"activation shape {activations.shape[1:]} does not match layer {layer_index} output {expected}"
        )
    return forward_batch(model, activations, start=layer_index + 1)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def predict_batch(scores: np.ndarray) -> np.ndarray:
    """Argmax per row with deterministic corruption semantics.

    Ties break to the lowest index.  A NaN score is treated as maximal
    (first NaN wins); all-NaN rows give INVALID_PREDICTION.
    """
    isnan = np.isnan(scores)
    any_nan = isnan.any(axis=1)
    preds = np.argmax(np.where(isnan, -np.inf, scores), axis=1).astype(np.int64)
    if any_nan.any():
        first_nan = np.argmax(isnan, axis=1)
        preds[any_nan] = first_nan[any_nan]
        preds[isnan.all(axis=1)] = INVALID_PREDICTION
    return preds


def predict(scores: np.ndarray) -> int:
    """Class index for a rank-1 score tensor (or INVALID_PREDICTION)."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ValidationError(f"predict expects rank-1 scores, got shape {scores.shape}")
    return int(predict_batch(scores[None])[0])
