"""Campaign orchestration: probability sweeps, per-layer experiments, reports.

A trial is one pass over the evaluation set under a fixed fault spec and a
derived random stream; its accuracy is one observation.  Each (target,
probability) cell runs `trials` independent trials, and the cumulative
moving average of the per-trial accuracies is reported so the trial count
can be judged sufficient.

Trials are embarrassingly parallel.  Results are merged in trial order no
matter which worker finishes first, so reports are byte-identical at any
parallelism level.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .engine import INVALID_PREDICTION, Model
from .errors import ValidationError
from .executor import (
    ActivationCache,
    PredictionSet,
    build_cache,
    golden_run,
    load_cache,
    run_injected_layerwise,
    run_injected_opwise,
)
from .faults import RECORD_DTYPE, RNG_ALGORITHM, FaultSpec
from .microops import INJECTABLE_KINDS, expand_prelu
from .model_io import (
    DEFAULT_BUDGET,
    DEFAULT_CMA_EPSILON,
    DEFAULT_CMA_WINDOW,
    DEFAULT_TRIALS,
    Dataset,
    RunConfig,
)

SUMMARY_FILE = "summary.json"
ACCURACY_FILE = "accuracy.csv"
CMA_FILE = "cma.csv"
RECORDS_FILE = "records.csv"
LAYERS_FILE = "layers.csv"


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def accuracy(preds: PredictionSet, reference) -> float:
    """Fraction of predictions equal to the reference.

    The reference is either a label vector or another PredictionSet (golden
    run).  Invalid predictions never match anything, including themselves.
    """
    p = np.asarray(preds.predictions, dtype=np.int64)
    ref = reference.predictions if isinstance(reference, PredictionSet) else reference
    ref = np.asarray(ref, dtype=np.int64)
    if len(p) != len(ref):
        raise ValidationError(f"prediction count {len(p)} does not match reference count {len(ref)}")
    match = (p == ref) & (p != INVALID_PREDICTION)
    return float(np.count_nonzero(match) / len(p))


def cma(series) -> list[float]:
    """Cumulative moving average via a running sum: out[n] = sum(x[:n+1])/(n+1)."""
    series = list(series)
    if not series:
        raise ValidationError("cma requires a non-empty series")
    out = []
    total = 0.0
    for i, x in enumerate(series):
        total += float(x)
        out.append(total / (i + 1))
    return out


@dataclass(frozen=True)
class ConvergenceCheck:
    converged: bool
    note: str | None = None


def check_convergence(cma_series, window: int = DEFAULT_CMA_WINDOW, epsilon: float = DEFAULT_CMA_EPSILON) -> ConvergenceCheck:
    """True iff the last `window` CMA values span at most `epsilon`."""
    if window < 2:
        raise ValidationError("convergence window must be at least 2")
    series = list(cma_series)
    if len(series) < window:
        return ConvergenceCheck(False, f"insufficient trials: {len(series)} < window {window}")
    tail = series[-window:]
    return ConvergenceCheck(max(tail) - min(tail) <= epsilon)


def converged(cma_series, window: int = DEFAULT_CMA_WINDOW, epsilon: float = DEFAULT_CMA_EPSILON) -> bool:
    return check_convergence(cma_series, window, epsilon).converged


def _seq_mean(xs) -> float:
    total = 0.0
    for x in xs:
        total += float(x)
    return total / len(xs)


def _seq_std(xs, mean: float) -> float:
    # population deviation (divisor N) over trial accuracies
    total = 0.0
    for x in xs:
        d = float(x) - mean
        total += d * d
    return math.sqrt(total / len(xs))


# ---------------------------------------------------------------------------
# Campaign specification and results
# ---------------------------------------------------------------------------


@dataclass
class CampaignSpec:
    mode: str  # "op" | "layer"
    targets: object  # "all", layer index list, or op-kind list
    probabilities: list[float]
    fault: str = "bit_flip_random"
    bit: int | None = None
    trials: int = DEFAULT_TRIALS
    metric: str = "golden_run"  # "ground_truth" | "golden_run"
    seed: int = 0
    out_dir: Path | None = None
    budget: int = DEFAULT_BUDGET
    cma_window: int = DEFAULT_CMA_WINDOW
    cma_epsilon: float = DEFAULT_CMA_EPSILON

    def __post_init__(self):
        if self.mode not in ("op", "layer"):
            raise ValidationError(f"mode must be 'op' or 'layer', got {self.mode!r}")
        if self.metric not in ("ground_truth", "golden_run"):
            raise ValidationError(f"metric must be 'ground_truth' or 'golden_run', got {self.metric!r}")
        if self.trials < 1:
            raise ValidationError("trials must be at least 1")
        probs = sorted(set(float(p) for p in self.probabilities))
        if not probs:
            raise ValidationError("at least one probability is required")
        for p in probs:
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"probability {p} outside [0, 1]")
        self.probabilities = probs

    @classmethod
    def from_config(cls, config: RunConfig) -> "CampaignSpec":
        return cls(
            mode=config.mode,
            targets=config.target,
            probabilities=config.probabilities,
            fault=config.fault,
            bit=config.bit,
            trials=config.trials,
            metric=config.metric,
            seed=config.seed,
            out_dir=config.out_dir,
            budget=config.budget,
            cma_window=config.cma_window,
            cma_epsilon=config.cma_epsilon,
        )


@dataclass(eq=False)
class CellResult:
    """Statistics for one (target, probability) cell."""

    target_label: str
    target_kind: str  # layer kind, or "" for op targets
    output_shape: tuple
    probability: float
    accuracies: list[float]
    cma: list[float]
    mean: float
    std: float
    min: float
    max: float
    converged: bool
    convergence_note: str | None
    records: np.ndarray  # RECORD_DTYPE


@dataclass(eq=False)
class CampaignResult:
    spec: CampaignSpec
    reference_accuracy: float
    golden: PredictionSet
    cells: list[CellResult]
    partial: bool = False


def _make_cell(label: str, kind: str, shape: tuple, probability: float, accuracies: list[float], records, spec: CampaignSpec) -> CellResult:
    series = cma(accuracies)
    check = check_convergence(series, spec.cma_window, spec.cma_epsilon)
    # mean is defined as the running-sum mean, which the CMA ends on exactly
    mean = series[-1]
    return CellResult(
        target_label=label,
        target_kind=kind,
        output_shape=shape,
        probability=probability,
        accuracies=accuracies,
        cma=series,
        mean=mean,
        std=_seq_std(accuracies, mean),
        min=min(accuracies),
        max=max(accuracies),
        converged=check.converged,
        convergence_note=check.note,
        records=records,
    )


def _resolve_layer_targets(spec: CampaignSpec, model: Model) -> list[int]:
    if spec.targets == "all":
        return list(range(len(model.layers)))
    targets = [int(t) for t in spec.targets]
    for t in targets:
        if not 0 <= t < len(model.layers):
            raise ValidationError(f"layer target {t} out of range for {len(model.layers)} layers")
    return targets


def _resolve_op_targets(spec: CampaignSpec, expanded) -> list[str]:
    present = expanded.kinds_present()
    if spec.targets == "all":
        kinds = [k for k in INJECTABLE_KINDS if k in present]
        if not kinds:
            raise ValidationError("model contains no injectable micro-ops")
        return kinds
    return [str(t) for t in spec.targets]


def _worker_count(workers) -> int:
    if workers is None:
        workers = int(os.environ.get("BITSTORM_THREADS", "0") or 0)
    if workers <= 0:
        workers = min(os.cpu_count() or 1, 8)
    return workers


def _run_trials(trials: int, workers: int, run_one):
    """Evaluate run_one(trial) for all trials, merging in trial order."""
    if workers <= 1:
        return [run_one(t) for t in range(trials)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, range(trials)))


def _layer_cache(model, dataset, layer, spec: CampaignSpec, cache_root: Path) -> ActivationCache:
    directory = cache_root / f"cache_layer_{layer}"
    if (directory / "cache_manifest.json").is_file():
        cache = load_cache(directory)
        if (
            cache.sample_count == len(dataset)
            and cache.layer == layer
            and cache.shape == model.output_shapes[layer]
        ):
            return cache
    return build_cache(model, dataset, layer, spec.budget, directory)


def run_stochastic(spec: CampaignSpec, model: Model, dataset: Dataset, workers: int | None = None, cache_root=None) -> CampaignResult:
    """Run the full sweep: every target, every probability, `trials` trials.

    On an error mid-campaign, the cells completed so far are flushed to
    spec.out_dir (when set) before the exception propagates.
    """
    workers = _worker_count(workers)
    golden = golden_run(model, dataset)
    if spec.metric == "ground_truth":
        reference = dataset.labels.astype(np.int64)
        reference_accuracy = accuracy(golden, reference)
    else:
        reference = golden
        reference_accuracy = 1.0

    tmp = None
    if cache_root is None:
        if spec.out_dir is not None:
            cache_root = Path(spec.out_dir) / "caches"
        else:
            tmp = tempfile.TemporaryDirectory(prefix="bitstorm_cache_")
            cache_root = Path(tmp.name)
    cache_root = Path(cache_root)

    cells: list[CellResult] = []
    result = CampaignResult(spec=spec, reference_accuracy=reference_accuracy, golden=golden, cells=cells)
    try:
        if spec.mode == "layer":
            targets = _resolve_layer_targets(spec, model)
            for layer in targets:
                cache = _layer_cache(model, dataset, layer, spec, cache_root)
                preload = cache.total_bytes <= spec.budget
                chunks = list(cache.iter_chunks()) if preload else None
                kind = model.layers[layer].kind
                shape = model.output_shapes[layer]
                for p in spec.probabilities:
                    fault = FaultSpec(mode="layer", target=layer, fault=spec.fault,
                                      probability=p, seed=spec.seed, bit=spec.bit)

                    def run_one(trial, fault=fault, cache=cache, chunks=chunks):
                        preds, records = run_injected_layerwise(model, cache, fault, trial, chunks=chunks)
                        return accuracy(preds, reference), records

                    outcomes = _run_trials(spec.trials, workers, run_one)
                    records = _concat_records([r for _, r in outcomes])
                    cells.append(_make_cell(str(layer), kind, shape, p,
                                            [a for a, _ in outcomes], records, spec))
        else:
            expanded = expand_prelu(model)
            targets = _resolve_op_targets(spec, expanded)
            for kind in targets:
                for p in spec.probabilities:
                    fault = FaultSpec(mode="op", target=(kind,), fault=spec.fault,
                                      probability=p, seed=spec.seed, bit=spec.bit)

                    def run_one(trial, fault=fault):
                        preds, records = run_injected_opwise(expanded, dataset, fault, trial)
                        return accuracy(preds, reference), records

                    outcomes = _run_trials(spec.trials, workers, run_one)
                    records = _concat_records([r for _, r in outcomes])
                    cells.append(_make_cell(kind, "", (), p, [a for a, _ in outcomes], records, spec))
    except BaseException:
        if spec.out_dir is not None and cells:
            result.partial = True
            emit_report(result, spec.out_dir)
        raise
    finally:
        if tmp is not None:
            tmp.cleanup()
    return result


def run_deterministic_100(spec: CampaignSpec, model: Model, dataset: Dataset, workers: int | None = None, cache_root=None) -> CampaignResult:
    """Per-layer experiments at a fixed 100% injection probability.

    Accuracy is measured against the golden run; layers appear in index
    order in the result.
    """
    if spec.mode != "layer":
        raise ValidationError("deterministic 100% campaigns are layer-wise")
    fixed = replace(spec, probabilities=[1.0], metric="golden_run")
    return run_stochastic(fixed, model, dataset, workers=workers, cache_root=cache_root)


def _concat_records(parts):
    parts = [p for p in parts if p.size]
    if not parts:
        return np.empty(0, dtype=RECORD_DTYPE)
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def _comment(spec: CampaignSpec) -> str:
    return f"# bitstorm {__version__}; rng={RNG_ALGORITHM}; seed={spec.seed}"


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_report(result: CampaignResult, out_dir) -> None:
    """Write summary.json plus the four CSV files; byte-stable on re-emit."""
    if not result.cells:
        raise ValidationError("cannot emit a report with no completed cells")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = result.spec

    cells_doc = []
    for cell in result.cells:
        cells_doc.append(
            {
                "target": cell.target_label,
                "kind": cell.target_kind,
                "output_shape": list(cell.output_shape),
                "probability": cell.probability,
                "trials": len(cell.accuracies),
                "mean": cell.mean,
                "std": cell.std,
                "min": cell.min,
                "max": cell.max,
                "converged": cell.converged,
                "convergence_note": cell.convergence_note,
                "injections": int(cell.records.size),
                "accuracies": cell.accuracies,
                "cma": cell.cma,
            }
        )
    summary = {
        "tool": f"bitstorm {__version__}",
        "rng": RNG_ALGORITHM,
        "seed": spec.seed,
        "mode": spec.mode,
        "fault": spec.fault,
        "bit": spec.bit,
        "metric": spec.metric,
        "trials": spec.trials,
        "probabilities": spec.probabilities,
        "convergence": {"window": spec.cma_window, "epsilon": spec.cma_epsilon},
        "reference_accuracy": result.reference_accuracy,
        "partial": result.partial,
        "cells": cells_doc,
    }
    (out_dir / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    header = _comment(spec)
    with open(out_dir / ACCURACY_FILE, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        fh.write("target,probability,trial,accuracy\n")
        for cell in result.cells:
            for t, acc in enumerate(cell.accuracies):
                fh.write(f"{cell.target_label},{_fmt(cell.probability)},{t},{_fmt(acc)}\n")

    with open(out_dir / CMA_FILE, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        fh.write("target,probability,trial,cma\n")
        for cell in result.cells:
            for t, value in enumerate(cell.cma):
                fh.write(f"{cell.target_label},{_fmt(cell.probability)},{t},{_fmt(value)}\n")

    with open(out_dir / RECORDS_FILE, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        fh.write("target,probability,trial,sample,site,element,bit,original_hex,corrupted_hex\n")
        for cell in result.cells:
            prefix = f"{cell.target_label},{_fmt(cell.probability)},"
            for rec in cell.records:
                fh.write(
                    prefix
                    + f"{int(rec['trial'])},{int(rec['sample'])},{int(rec['site'])},"
                    + f"{int(rec['element'])},{int(rec['bit'])},"
                    + f"{int(rec['original']):08x},{int(rec['corrupted']):08x}\n"
                )

    with open(out_dir / LAYERS_FILE, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        fh.write("target,kind,output_shape,probability,mean,std,min,max\n")
        for cell in result.cells:
            shape = "x".join(str(e) for e in cell.output_shape)
            fh.write(
                f"{cell.target_label},{cell.target_kind},{shape},{_fmt(cell.probability)},"
                f"{_fmt(cell.mean)},{_fmt(cell.std)},{_fmt(cell.min)},{_fmt(cell.max)}\n"
            )
