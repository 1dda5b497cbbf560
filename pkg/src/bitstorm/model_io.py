"""Bit-exact serialization: model manifests, weight blobs, datasets, configs.

On-disk formats (all multi-byte values little-endian):

* ``model.json``  -- UTF-8 JSON manifest; weight tensors are referenced by
  byte offset/length into a sibling raw binary32 blob (row-major).
* ``weights.bin`` -- concatenated raw float32 data, no header.
* ``samples.bin`` -- magic ``BSDS``, u32 version, u32 sample count,
  u32 rank, u32 extents..., then float32 payload (sample-major).
* ``labels.bin``  -- magic ``BSLB``, u32 count, then u32 labels.
* ``config.json`` -- UTF-8 JSON run configuration.

Weight bytes are reinterpreted directly as binary32 values; loading never
converts or rounds.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .engine import Conv2D, Dense, Dropout, Flatten, MaxPool2D, Model, PReLU, ReLU, Softmax
from .errors import ValidationError
from .faults import FAULT_KINDS

FORMAT_VERSION = 1
SAMPLES_MAGIC = b"BSDS"
LABELS_MAGIC = b"BSLB"


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ValidationError(f"{where}: missing required field {key!r}")
    return doc[key]


class _BlobReader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.path = path

    def tensor(self, ref: dict, shape, where: str) -> np.ndarray:
        offset = int(_require(ref, "offset", where))
        length = int(_require(ref, "length", where))
        expected = int(np.prod(shape)) * 4
        if length != expected:
            raise ValidationError(
                f"{where}: blob length {length} does not match shape {tuple(shape)} ({expected} bytes)"
            )
        if offset < 0 or offset + length > len(self.data):
            raise ValidationError(
                f"{where}: blob range [{offset}, {offset + length}) outside {self.path.name} "
                f"({len(self.data)} bytes)"
            )
        arr = np.frombuffer(self.data, dtype="<f4", count=length // 4, offset=offset)
        return arr.reshape(shape)


def _layer_from_entry(entry: dict, index: int, blob: _BlobReader):
    where = f"layers[{index}]"
    kind = _require(entry, "kind", where)
    name = entry.get("name", f"{kind.lower()}_{index}")
    where = f"{where} ({name})"
    if kind == "Conv2D":
        kshape = _require(entry, "kernel_shape", where)
        return Conv2D(
            kernel=blob.tensor(_require(entry, "kernel", where), kshape, f"{where}.kernel"),
            bias=blob.tensor(_require(entry, "bias", where), (kshape[3],), f"{where}.bias"),
            stride=tuple(entry.get("stride", (1, 1))),
            padding=entry.get("padding", "valid"),
            name=name,
        )
    if kind == "MaxPool2D":
        return MaxPool2D(
            window=tuple(_require(entry, "window", where)),
            stride=tuple(entry.get("stride", entry.get("window", (2, 2)))),
            name=name,
        )
    if kind == "Dense":
        wshape = _require(entry, "weights_shape", where)
        activation = entry.get("activation")
        return Dense(
            weights=blob.tensor(_require(entry, "weights", where), wshape, f"{where}.weights"),
            bias=blob.tensor(_require(entry, "bias", where), (wshape[1],), f"{where}.bias"),
            activation=activation,
            name=name,
        )
    if kind == "PReLU":
        ashape = _require(entry, "alpha_shape", where)
        return PReLU(alpha=blob.tensor(_require(entry, "alpha", where), ashape, f"{where}.alpha"), name=name)
    if kind == "ReLU":
        return ReLU(name=name)
    if kind == "Softmax":
        return Softmax(name=name)
    if kind == "Flatten":
        return Flatten(name=name)
    if kind == "Dropout":
        return Dropout(rate=float(entry.get("rate", 0.0)), name=name)
    raise ValidationError(f"{where}: unknown layer kind {kind!r}")


def load_model(manifest_path) -> Model:
    """Load and shape-validate a model from its JSON manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ValidationError(f"model manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{manifest_path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ValidationError(f"{manifest_path}: unsupported format_version {version}")
    weights_path = manifest_path.parent / _require(doc, "weights_file", str(manifest_path))
    if not weights_path.is_file():
        raise ValidationError(f"weight blob not found: {weights_path}")
    blob = _BlobReader(weights_path.read_bytes(), weights_path)
    input_shape = tuple(_require(doc, "input_shape", str(manifest_path)))
    entries = _require(doc, "layers", str(manifest_path))
    layers = [_layer_from_entry(entry, i, blob) for i, entry in enumerate(entries)]
    try:
        return Model(input_shape=input_shape, layers=layers)
    except ValidationError as exc:
        raise ValidationError(f"{manifest_path}: {exc}") from None


def _weight_arrays(layer):
    if isinstance(layer, Conv2D):
        return [("kernel", layer.kernel), ("bias", layer.bias)]
    if isinstance(layer, Dense):
        return [("weights", layer.weights), ("bias", layer.bias)]
    if isinstance(layer, PReLU):
        return [("alpha", layer.alpha)]
    return []


def save_model(model: Model, manifest_path) -> None:
    """Write the manifest plus weight blob; load_model round-trips bit-exactly."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    entries = []
    for layer in model.layers:
        entry = {"kind": layer.kind, "name": layer.name}
        if isinstance(layer, Conv2D):
            entry["kernel_shape"] = list(layer.kernel.shape)
            entry["stride"] = list(layer.stride)
            entry["padding"] = layer.padding
        elif isinstance(layer, Dense):
            entry["weights_shape"] = list(layer.weights.shape)
            if layer.activation:
                entry["activation"] = layer.activation
        elif isinstance(layer, PReLU):
            entry["alpha_shape"] = list(layer.alpha.shape)
        elif isinstance(layer, MaxPool2D):
            entry["window"] = list(layer.window)
            entry["stride"] = list(layer.stride)
        elif isinstance(layer, Dropout):
            entry["rate"] = layer.rate
        for field_name, arr in _weight_arrays(layer):
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entry[field_name] = {"offset": len(blob), "length": len(raw)}
            blob.extend(raw)
        entries.append(entry)
    weights_name = manifest_path.stem + "_weights.bin" if manifest_path.stem != "model" else "weights.bin"
    doc = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "weights_file": weights_name,
        "layers": entries,
    }
    (manifest_path.parent / weights_name).write_bytes(bytes(blob))
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Dataset:
    """Uniform-shape input tensors with class labels."""

    samples: np.ndarray  # (count, *sample shape) float32
    labels: np.ndarray  # (count,) uint32
    class_count: int

    def __post_init__(self):
        if self.samples.ndim < 2:
            raise ValidationError("samples must have a leading sample axis plus tensor extents")
        if len(self.labels) != len(self.samples):
            raise ValidationError(
                f"dataset has {len(self.samples)} samples but {len(self.labels)} labels"
            )
        if len(self.samples) == 0:
            raise ValidationError("dataset must contain at least one sample")
        if self.class_count < 1:
            raise ValidationError("class_count must be positive")
        if self.labels.size and int(self.labels.max()) >= self.class_count:
            raise ValidationError(
                f"label {int(self.labels.max())} out of range for class_count {self.class_count}"
            )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def sample_shape(self):
        return self.samples.shape[1:]


def save_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shape = dataset.sample_shape
    header = struct.pack(
        f"<4sIII{len(shape)}I", SAMPLES_MAGIC, FORMAT_VERSION, len(dataset), len(shape), *shape
    )
    payload = np.ascontiguousarray(dataset.samples, dtype="<f4").tobytes()
    (directory / "samples.bin").write_bytes(header + payload)
    labels = struct.pack("<4sI", LABELS_MAGIC, len(dataset))
    labels += np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes()
    (directory / "labels.bin").write_bytes(labels)


def load_dataset(directory, class_count: int | None = None) -> Dataset:
    """Load samples.bin + labels.bin from a dataset directory.

    If `class_count` is not given (e.g. when the pairing model is not yet
    known) it is inferred as max(label) + 1; passing the model's class
    count enforces that every label is in range.
    """
    directory = Path(directory)
    samples_path = directory / "samples.bin"
    labels_path = directory / "labels.bin"
    for p in (samples_path, labels_path):
        if not p.is_file():
            raise ValidationError(f"dataset file not found: {p}")

    raw = samples_path.read_bytes()
    if len(raw) < 16 or raw[:4] != SAMPLES_MAGIC:
        raise ValidationError(f"{samples_path}: bad magic, expected {SAMPLES_MAGIC!r}")
    version, count, rank = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION:
        raise ValidationError(f"{samples_path}: unsupported version {version}")
    extents = struct.unpack_from(f"<{rank}I", raw, 16)
    offset = 16 + 4 * rank
    expected = count * int(np.prod(extents)) * 4
    if len(raw) - offset != expected:
        raise ValidationError(
            f"{samples_path}: payload is {len(raw) - offset} bytes, header promises {expected}"
        )
    samples = np.frombuffer(raw, dtype="<f4", offset=offset).reshape((count, *extents))

    raw = labels_path.read_bytes()
    if len(raw) < 8 or raw[:4] != LABELS_MAGIC:
        raise ValidationError(f"{labels_path}: bad magic, expected {LABELS_MAGIC!r}")
    (label_count,) = struct.unpack_from("<I", raw, 4)
    if len(raw) - 8 != label_count * 4:
        raise ValidationError(
            f"{labels_path}: payload is {(len(raw) - 8) // 4} labels, header promises {label_count}"
        )
    labels = np.frombuffer(raw, dtype="<u4", offset=8)
    if label_count != count:
        raise ValidationError(
            f"dataset mismatch: {count} samples but {label_count} labels"
        )
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return Dataset(samples=samples, labels=labels, class_count=class_count)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

DEFAULT_TRIALS = 100
DEFAULT_CMA_WINDOW = 20
DEFAULT_CMA_EPSILON = 0.002
DEFAULT_BUDGET = 64 * 1024 * 1024

_MODES = ("op", "layer")
_METRICS = ("ground_truth", "golden_run")


@dataclass
class RunConfig:
    """Validated contents of a config.json."""

    model: Path
    dataset: Path
    mode: str
    target: object  # "all", layer index list, or op-kind list
    fault: str
    probabilities: list[float]
    trials: int
    metric: str
    seed: int
    out_dir: Path
    bit: int | None = None
    budget: int = DEFAULT_BUDGET
    cma_window: int = DEFAULT_CMA_WINDOW
    cma_epsilon: float = DEFAULT_CMA_EPSILON


def _parse_target(mode: str, target, where: str):
    if target == "all":
        return "all"
    if mode == "layer":
        targets = target if isinstance(target, list) else [target]
        if not targets:
            raise ValidationError(f"{where}: target list must not be empty")
        for t in targets:
            if not isinstance(t, int) or t < 0:
                raise ValidationError(f"{where}: layer targets must be non-negative indices, got {t!r}")
        return [int(t) for t in targets]
    targets = target if isinstance(target, list) else [target]
    if not targets:
        raise ValidationError(f"{where}: target list must not be empty")
    for t in targets:
        if not isinstance(t, str):
            raise ValidationError(f"{where}: op targets must be op-kind names, got {t!r}")
    return [str(t) for t in targets]


def load_config(path) -> RunConfig:
    """Load and validate a run configuration."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    where = str(path)

    mode = _require(doc, "mode", where)
    if mode not in _MODES:
        raise ValidationError(f"{where}: mode must be one of {_MODES}, got {mode!r}")
    fault = _require(doc, "fault", where)
    if fault not in FAULT_KINDS:
        raise ValidationError(f"{where}: fault must be one of {FAULT_KINDS}, got {fault!r}")
    bit = doc.get("bit")
    if fault == "bit_flip_specific":
        if bit is None or not isinstance(bit, int) or not 0 <= bit <= 31:
            raise ValidationError(f"{where}: field 'bit' must be an integer in 0..31 for bit_flip_specific")
    elif bit is not None:
        raise ValidationError(f"{where}: field 'bit' is only valid with fault bit_flip_specific")

    probabilities = _require(doc, "probabilities", where)
    if not isinstance(probabilities, list) or not probabilities:
        raise ValidationError(f"{where}: probabilities must be a non-empty list")
    for p in probabilities:
        if not isinstance(p, (int, float)) or not 0.0 <= p <= 1.0:
            raise ValidationError(f"{where}: probability {p!r} outside [0, 1]")

    trials = doc.get("trials", DEFAULT_TRIALS)
    if not isinstance(trials, int) or trials < 1:
        raise ValidationError(f"{where}: trials must be an integer >= 1, got {trials!r}")

    metric = doc.get("metric", "golden_run")
    if metric not in _METRICS:
        raise ValidationError(f"{where}: metric must be one of {_METRICS}, got {metric!r}")

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ValidationError(f"{where}: seed must be an unsigned 64-bit integer")

    budget = doc.get("budget", DEFAULT_BUDGET)
    if not isinstance(budget, int) or budget < 1:
        raise ValidationError(f"{where}: budget must be a positive byte count")

    window = doc.get("cma_window", DEFAULT_CMA_WINDOW)
    if not isinstance(window, int) or window < 2:
        raise ValidationError(f"{where}: cma_window must be an integer >= 2")
    epsilon = doc.get("cma_epsilon", DEFAULT_CMA_EPSILON)
    if not isinstance(epsilon, (int, float)) or epsilon <= 0:
        raise ValidationError(f"{where}: cma_epsilon must be positive")

    base = path.parent
    return RunConfig(
        model=base / _require(doc, "model", where),
        dataset=base / _require(doc, "dataset", where),
        mode=mode,
        target=_parse_target(mode, _require(doc, "target", where), where),
        fault=fault,
        bit=bit,
        probabilities=[float(p) for p in probabilities],
        trials=trials,
        metric=metric,
        seed=seed,
        out_dir=base / _require(doc, "out_dir", where),
        budget=budget,
        cma_window=window,
        cma_epsilon=float(epsilon),
    )


def save_config(doc: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
