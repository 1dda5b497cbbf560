"""Inference drivers: golden runs, injection hooks, split execution.

Layer-wise campaigns split the model at the injection layer: the head runs
once per dataset and its outputs are cached to disk in fixed-size chunks,
then every trial replays only the tail on (copies of) the cached
activations.  The cache is never mutated by a trial.

Operation-wise campaigns run the micro-op expansion end to end and apply
the fault model to the output of every executed op whose kind is targeted,
so several faults may land during a single inference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine
from .engine import Model, forward_batch, head_batch, predict_batch, tail_scores_batch
from .errors import ResourceError, ValidationError
from .faults import RECORD_DTYPE, FaultSpec, inject_batch
from .microops import MicroOpModel, run_microops_batch
from .model_io import Dataset

CACHE_MANIFEST = "cache_manifest.json"

#: Cap on how many samples are pushed through the head in one batch while
#: building a cache; keeps transient compute buffers small.
_BUILD_BATCH = 256


@dataclass(eq=False)
class PredictionSet:
    """Per-sample predicted class indices (INVALID_PREDICTION marks all-NaN scores)."""

    predictions: np.ndarray  # (samples,) int64
    provenance: str  # "golden" | "injected"
    spec_digest: str

    def __len__(self) -> int:
        return len(self.predictions)


def _check_pairing(model: Model, dataset: Dataset):
    if dataset.sample_shape != model.input_shape:
        raise ValidationError(
            f"dataset sample shape {dataset.sample_shape} does not match model input {model.input_shape}"
        )
    if dataset.class_count > model.class_count:
        raise ValidationError(
            f"dataset declares {dataset.class_count} classes but model scores {model.class_count}"
        )


def golden_run(model: Model, dataset: Dataset) -> PredictionSet:
    """Injection-free predictions for the whole dataset; deterministic."""
    _check_pairing(model, dataset)
    scores = forward_batch(model, dataset.samples)
    return PredictionSet(predictions=predict_batch(scores), provenance="golden", spec_digest="golden")


def run_tail(model: Model, layer_index: int, activation: np.ndarray) -> int:
    """Prediction from executing only the layers after `layer_index`."""
    scores = tail_scores_batch(model, layer_index, np.asarray(activation, dtype=engine.F32)[None])
    return int(predict_batch(scores)[0])


# ---------------------------------------------------------------------------
# Activation cache
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ActivationCache:
    """Chunked on-disk store of one layer's outputs for an entire dataset."""

    directory: Path
    layer: int
    sample_count: int
    shape: tuple
    samples_per_chunk: int
    chunk_count: int
    budget: int

    @property
    def bytes_per_sample(self) -> int:
        return int(np.prod(self.shape)) * 4

    @property
    def total_bytes(self) -> int:
        return self.bytes_per_sample * self.sample_count

    def chunk_path(self, index: int) -> Path:
        return self.directory / f"chunk_{index}.bin"

    def iter_chunks(self):
        """Yield (start_sample, activations) per chunk in sequential order.

        Activation arrays are read-only; trials corrupt copies, never the
        cache.
        """
        for k in range(self.chunk_count):
            start = k * self.samples_per_chunk
            count = min(self.samples_per_chunk, self.sample_count - start)
            raw = self.chunk_path(k).read_bytes()
            expected = count * self.bytes_per_sample
            if len(raw) != expected:
                raise ValidationError(
                    f"{self.chunk_path(k)}: {len(raw)} bytes on disk, manifest promises {expected}"
                )
            acts = np.frombuffer(raw, dtype="<f4").reshape((count, *self.shape))
            yield start, acts

    def save_manifest(self):
        doc = {
            "layer": self.layer,
            "sample_count": self.sample_count,
            "shape": list(self.shape),
            "dtype": "<f4",
            "samples_per_chunk": self.samples_per_chunk,
            "chunk_count": self.chunk_count,
            "budget": self.budget,
        }
        path = self.directory / CACHE_MANIFEST
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_cache(directory) -> ActivationCache:
    directory = Path(directory)
    path = directory / CACHE_MANIFEST
    if not path.is_file():
        raise ValidationError(f"cache manifest not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    return ActivationCache(
        directory=directory,
        layer=int(doc["layer"]),
        sample_count=int(doc["sample_count"]),
        shape=tuple(doc["shape"]),
        samples_per_chunk=int(doc["samples_per_chunk"]),
        chunk_count=int(doc["chunk_count"]),
        budget=int(doc["budget"]),
    )


def build_cache(model: Model, dataset: Dataset, layer: int, budget: int, directory) -> ActivationCache:
    """Run the head once and persist layer outputs in chunks within `budget`.

    The chunk buffer never exceeds the byte budget; anything larger spills
    into additional chunk files read back sequentially during replay.
    """
    _check_pairing(model, dataset)
    if not 0 <= layer < len(model.layers):
        raise ValidationError(f"layer index {layer} out of range for {len(model.layers)} layers")
    shape = model.output_shapes[layer]
    bytes_per_sample = int(np.prod(shape)) * 4
    if budget < bytes_per_sample:
        raise ResourceError(
            f"memory budget {budget} bytes is below one sample's activation ({bytes_per_sample} bytes)"
        )
    samples_per_chunk = min(budget // bytes_per_sample, len(dataset))
    chunk_count = -(-len(dataset) // samples_per_chunk)

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cache = ActivationCache(
        directory=directory,
        layer=layer,
        sample_count=len(dataset),
        shape=shape,
        samples_per_chunk=int(samples_per_chunk),
        chunk_count=int(chunk_count),
        budget=int(budget),
    )
    for k in range(chunk_count):
        start = k * cache.samples_per_chunk
        count = min(cache.samples_per_chunk, len(dataset) - start)
        buffer = np.empty((count, *shape), dtype="<f4")
        for b in range(0, count, _BUILD_BATCH):
            hi = min(b + _BUILD_BATCH, count)
            buffer[b:hi] = head_batch(model, layer, dataset.samples[start + b : start + hi])
        try:
            cache.chunk_path(k).write_bytes(buffer.tobytes())
        except OSError as exc:
            raise ResourceError(f"failed to write {cache.chunk_path(k)}: {exc}") from None
    cache.save_manifest()
    return cache


# ---------------------------------------------------------------------------
# Injected runs
# ---------------------------------------------------------------------------


def run_injected_layerwise(model: Model, cache: ActivationCache, spec: FaultSpec, trial: int, chunks=None):
    """One trial: inject at most once per sample into cached activations.

    `chunks` may carry preloaded (start, activations) pairs to avoid
    re-reading small caches from disk; results are bit-identical either way.
    """
    if spec.mode != "layer":
        raise ValidationError("run_injected_layerwise requires an operation mode of 'layer'")
    if cache.layer != spec.target:
        raise ValidationError(f"cache holds layer {cache.layer} but spec targets layer {spec.target}")
    preds = np.empty(cache.sample_count, dtype=np.int64)
    all_records = []
    for start, acts in chunks if chunks is not None else cache.iter_chunks():
        sample_ids = np.arange(start, start + acts.shape[0], dtype=np.uint64)
        corrupted, records = inject_batch(acts, spec, trial, sample_ids, site=cache.layer)
        scores = tail_scores_batch(model, cache.layer, corrupted)
        preds[start : start + acts.shape[0]] = predict_batch(scores)
        if records.size:
            all_records.append(records)
    records = np.concatenate(all_records) if all_records else np.empty(0, dtype=RECORD_DTYPE)
    return PredictionSet(preds, "injected", spec.digest()), records


def run_injected_opwise(expanded: MicroOpModel, dataset: Dataset, spec: FaultSpec, trial: int):
    """One trial: apply the fault model to every targeted op execution."""
    if spec.mode != "op":
        raise ValidationError("run_injected_opwise requires an operation mode of 'op'")
    _check_pairing(expanded.model, dataset)
    target = set(spec.target)
    present = expanded.kinds_present()
    missing = sorted(target - present)
    if missing:
        raise ValidationError(
            f"target op kinds {missing} do not occur in the model (present: {sorted(present - {'Opaque'})})"
        )
    sample_ids = np.arange(len(dataset), dtype=np.uint64)
    all_records = []

    def hook(op, out):
        if op.kind not in target:
            return out
        corrupted, records = inject_batch(out, spec, trial, sample_ids, site=op.op_id)
        if records.size:
            all_records.append(records)
        return corrupted

    scores = run_microops_batch(expanded, dataset.samples, hook=hook)
    records = np.concatenate(all_records) if all_records else np.empty(0, dtype=RECORD_DTYPE)
    return PredictionSet(predict_batch(scores), "injected", spec.digest()), records


def replay_layerwise(model: Model, cache: ActivationCache, records: np.ndarray) -> PredictionSet:
    """Re-apply recorded corruptions to cached activations and rerun the tail.

    Reproduces the originating trial's predictions exactly; samples without
    a record stay fault-free.
    """
    preds = np.empty(cache.sample_count, dtype=np.int64)
    for start, acts in cache.iter_chunks():
        acts = acts.copy()
        flat = acts.reshape(acts.shape[0], -1).view(np.uint32)
        in_chunk = (records["sample"] >= start) & (records["sample"] < start + acts.shape[0])
        for rec in records[in_chunk]:
            if int(rec["site"]) != cache.layer:
                raise ValidationError(f"record site {rec['site']} does not match cache layer {cache.layer}")
            flat[int(rec["sample"]) - start, int(rec["element"])] = rec["corrupted"]
        scores = tail_scores_batch(model, cache.layer, acts)
        preds[start : start + acts.shape[0]] = predict_batch(scores)
    return PredictionSet(preds, "injected", "replay")
