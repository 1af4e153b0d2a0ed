"""Performance, complexity and robustness evaluation plus cross-task aggregation."""

from __future__ import annotations

import csv
import math
import resource
import time
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class PerformanceReport:
    task_kind: str
    metrics: dict

    def __getitem__(self, key):
        return self.metrics[key]

    def to_json(self):
        return {"task_kind": self.task_kind, "metrics": dict(self.metrics)}


@dataclass
class ComplexityReport:
    train_param_count: int
    inference_param_count: int
    train_time_s: float = 0.0
    inference_time_s: float = 0.0
    peak_memory_bytes: int = 0
    input_bits: int = 0

    def __post_init__(self):
        if self.inference_param_count > self.train_param_count:
            raise ValueError("inference parameters cannot exceed training parameters")
        if self.train_time_s < 0 or self.inference_time_s < 0:
            raise ValueError("times must be non-negative")

    def to_json(self):
        return asdict(self)


@dataclass
class RobustnessCurve:
    partition: str
    sigmas: list
    values: list

    def __post_init__(self):
        self.sigmas = [float(s) for s in self.sigmas]
        self.values = [float(v) for v in self.values]
        if not self.sigmas:
            raise ValueError("a curve needs at least one point")
        if self.sigmas[0] != 0.0:
            raise ValueError("curves start at sigma = 0")
        if any(b <= a for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ValueError("sigma values must be strictly ascending")
        if len(self.values) != len(self.sigmas):
            raise ValueError("one value per sigma")

    @property
    def points(self):
        return list(zip(self.sigmas, self.values))

    def to_json(self):
        return {"partition": self.partition, "sigmas": self.sigmas, "values": self.values}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["partition"], obj["sigmas"], obj["values"])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sigma", "value"])
            writer.writerows((repr(s), repr(v)) for s, v in self.points)


@dataclass
class RobustnessScores:
    tau: float
    rho: float

    def __post_init__(self):
        if not (math.isfinite(self.tau) and math.isfinite(self.rho)):
            raise ValueError("robustness scores must be finite")


# higher-is-better unless listed here
LOWER_IS_BETTER = {"mse", "mae"}


def f1_from_counts(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def average_precision(y_true, scores):
    """Step-wise area under the precision-recall curve (average precision)."""
    y_true = np.asarray(y_true).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(y_true.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="mergesort")
    scores, y_true = scores[order], y_true[order]
    last = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]
    tps = np.cumsum(y_true)[last]
    fps = (last + 1) - tps
    precision = tps / (tps + fps)
    recall = tps / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _macro_ap(indicator, scores):
    aps = [average_precision(indicator[:, k], scores[:, k]) for k in range(indicator.shape[1])]
    aps = [a for a in aps if not math.isnan(a)]
    return float(np.mean(aps)) if aps else 0.0


def confusion_counts(pred, labels, n_classes):
    """Per-class (tp, fp, fn) arrays for single-label predictions."""
    tp = np.array([np.sum((pred == k) & (labels == k)) for k in range(n_classes)])
    fp = np.array([np.sum((pred == k) & (labels != k)) for k in range(n_classes)])
    fn = np.array([np.sum((pred != k) & (labels == k)) for k in range(n_classes)])
    return tp, fp, fn


def compute_performance(predictions, labels, task_kind="classification", scores=None,
                        n_classes=None):
    """Accuracy, micro/macro F1 and AUPRC for classification-style tasks; MSE/MAE
    for regression.

    For single-label classification, micro-F1 pools counts over all classes (and so
    equals accuracy); a class absent from both predictions and labels scores F1 = 0.
    For ``multilabel`` tasks, predictions and labels are (n, L) indicator arrays and
    pooling runs over labels. AUPRC uses ``scores`` (class probabilities) when given,
    otherwise the one-hot predictions, and is macro-averaged over classes with at
    least one positive.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) != len(labels) or len(labels) < 1:
        raise ValueError("predictions and labels must have equal, non-zero length")
    if task_kind == "regression":
        diff = predictions.astype(np.float64).reshape(labels.shape) - labels
        return PerformanceReport(task_kind, {"mse": float(np.mean(diff ** 2)),
                                             "mae": float(np.mean(np.abs(diff)))})
    if task_kind == "classification":
        predictions = predictions.astype(np.int64)
        labels = labels.astype(np.int64)
        K = n_classes or int(max(predictions.max(), labels.max())) + 1
        tp, fp, fn = confusion_counts(predictions, labels, K)
        indicator = np.eye(K, dtype=bool)[labels]
        if scores is None:
            scores = np.eye(K)[predictions]
        scores = np.asarray(scores, dtype=np.float64)
        auprc = (average_precision(indicator[:, 1], scores[:, 1]) if K == 2
                 else _macro_ap(indicator, scores))
        auprc = 0.0 if math.isnan(auprc) else auprc
        accuracy = float(np.mean(predictions == labels))
    elif task_kind == "multilabel":
        predictions = predictions.astype(bool)
        labels = labels.astype(bool)
        tp = (predictions & labels).sum(axis=0)
        fp = (predictions & ~labels).sum(axis=0)
        fn = (~predictions & labels).sum(axis=0)
        scores = predictions.astype(np.float64) if scores is None else np.asarray(scores)
        auprc = _macro_ap(labels, scores)
        accuracy = float(np.mean(predictions == labels))
    else:
        raise ValueError(f"unknown task kind {task_kind!r}")
    micro = f1_from_counts(int(tp.sum()), int(fp.sum()), int(fn.sum()))
    macro = float(np.mean([f1_from_counts(int(a), int(b), int(c)) for a, b, c in zip(tp, fp, fn)]))
    return PerformanceReport(task_kind, {"accuracy": accuracy, "micro_f1": float(micro),
                                         "macro_f1": macro, "auprc": float(auprc)})


def primary_metric(task_kind):
    return "mse" if task_kind == "regression" else "accuracy"


def peak_memory_bytes():
    """Peak resident set size of this process (Linux reports KiB)."""
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


def profile_complexity(model, test_split, train_time_s=0.0):
    """Time inference over the whole test split and collect parameter counts.

    ``model`` must provide ``predict(modalities)`` and ``param_counts()`` returning
    ``(train_count, inference_count)``; the train time comes from the training run.
    """
    start = time.perf_counter()
    model.predict(test_split.modalities)
    inference_time = time.perf_counter() - start
    train_count, inference_count = model.param_counts()
    return ComplexityReport(
        train_param_count=int(train_count),
        inference_param_count=int(inference_count),
        train_time_s=float(train_time_s),
        inference_time_s=float(inference_time),
        peak_memory_bytes=peak_memory_bytes(),
        input_bits=int(test_split.nbytes()) * 8,
    )


def evaluate_grid(model, grid):
    """Predictions for every (partition, level) of a noisy test grid."""
    if not grid.partitions or not grid.levels:
        raise ValueError("empty robustness grid")
    out = {}
    for partition in grid.partitions:
        for level in grid.levels:
            out[(partition, level)] = model.predict(grid.get(partition, level))
    return out


def curves_from_predictions(preds, labels, grid, task_kind, metric=None, n_classes=None):
    metric = metric or primary_metric(task_kind)
    curves = {}
    for partition in grid.partitions:
        values = []
        for level in grid.levels:
            pred, scores = preds[(partition, level)]
            report = compute_performance(pred, labels, task_kind, scores, n_classes)
            values.append(report[metric])
        curves[partition] = RobustnessCurve(partition, list(grid.levels), values)
    return curves


def robustness_curve(model, grid, task_kind="classification", metric=None, n_classes=None):
    """One performance-imperfection curve per grid partition."""
    preds = evaluate_grid(model, grid)
    return curves_from_predictions(preds, grid.labels, grid, task_kind, metric, n_classes)


def trapezoid(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def _check_grid(curve_f, curve_b):
    if list(curve_f.sigmas) != list(curve_b.sigmas):
        raise ValueError("curves must share the same sigma grid")


def relative_robustness(curve_f, curve_lf):
    """Area between the model curve and the late-fusion baseline curve."""
    _check_grid(curve_f, curve_lf)
    gap = np.asarray(curve_f.values) - np.asarray(curve_lf.values)
    return trapezoid(curve_f.sigmas, gap)


def fit_baseline_trend(clean_value_f, curve_lf, clip=(0.0, 1.0)):
    """Baseline curve shifted vertically so its sigma = 0 value equals the model's."""
    if not curve_lf.values:
        raise ValueError("empty baseline curve")
    shift = clean_value_f - curve_lf.values[0]
    shifted = np.asarray(curve_lf.values) + shift
    if clip is not None:
        shifted = np.clip(shifted, *clip)
    return RobustnessCurve(curve_lf.partition + ":shifted", curve_lf.sigmas, shifted.tolist())


def effective_robustness(curve_f, curve_lf, clip=(0.0, 1.0)):
    """Area between the model curve and the baseline shifted to the model's clean value."""
    _check_grid(curve_f, curve_lf)
    shifted = fit_baseline_trend(curve_f.values[0], curve_lf, clip)
    gap = np.asarray(curve_f.values) - np.asarray(shifted.values)
    return trapezoid(curve_f.sigmas, gap)


def robustness_scores(curve_f, curve_lf, higher_is_better=True):
    """tau and rho against a baseline. For lower-is-better metrics both are negated
    so that positive still means more robust than the baseline."""
    clip = (0.0, 1.0) if higher_is_better else None
    sign = 1.0 if higher_is_better else -1.0
    return RobustnessScores(sign * relative_robustness(curve_f, curve_lf),
                            sign * effective_robustness(curve_f, curve_lf, clip))


def minmax_normalize(column, direction="max"):
    """Map a {model: value} column onto [0, 1] with the best model at 1.

    A column whose values are all equal maps every model to 1.0.
    """
    values = np.array(list(column.values()), dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return {m: 1.0 for m in column}
    if direction == "max":
        return {m: float((v - lo) / (hi - lo)) for m, v in column.items()}
    if direction == "min":
        return {m: float((hi - v) / (hi - lo)) for m, v in column.items()}
    raise ValueError(f"direction must be 'max' or 'min', got {direction!r}")


def aggregate_minmax(results, directions=None, datasets=None):
    """Weighted average of per-task min-max normalised results.

    ``results`` maps task -> {model: value}. ``directions`` maps task -> 'max'/'min'
    (default 'max'). ``datasets`` maps task -> dataset name; each task of a dataset
    with n tasks gets weight 1/n (default: every task is its own dataset). A model
    is averaged only over the tasks it appears in. Returns {model: score}.
    """
    directions = directions or {}
    datasets = datasets or {t: t for t in results}
    n_per_dataset = {}
    for task in results:
        n_per_dataset[datasets[task]] = n_per_dataset.get(datasets[task], 0) + 1
    totals, weights = {}, {}
    for task, column in results.items():
        if len(column) < 2:
            raise ValueError(f"task {task!r} needs at least 2 models for min-max scaling")
        normalized = minmax_normalize(column, directions.get(task, "max"))
        w = 1.0 / n_per_dataset[datasets[task]]
        for model, value in normalized.items():
            totals[model] = totals.get(model, 0.0) + w * value
            weights[model] = weights.get(model, 0.0) + w
    scores = {m: totals[m] / weights[m] for m in totals}
    return scores


def aggregate_complexity(train_time_model, train_time_unimodal):
    """-log10 of the training-time ratio to the best unimodal model (higher = faster)."""
    if train_time_model <= 0 or train_time_unimodal <= 0:
        raise ValueError("training times must be positive")
    return -math.log10(train_time_model / train_time_unimodal) + 0.0
