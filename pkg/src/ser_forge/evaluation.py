"""Confusion matrices and the accuracy / balanced accuracy / macro-F1 family."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyEval, LabelError, ShapeError


@dataclass
class ConfusionMatrix:
    """Rows are true labels, columns predictions."""

    counts: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        n = self.counts.shape[0]
        if self.counts.shape != (n, n) or np.any(self.counts < 0):
            raise ShapeError(f"confusion counts must be a non-negative square matrix, got {self.counts.shape}")
        self.labels = tuple(self.labels) or tuple(str(i) for i in range(n))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_text(self) -> str:
        """Aligned plain-text table."""
        width = max([len("true\\pred")] + [len(l) for l in self.labels] + [len(str(self.counts.max(initial=0)))])
        lines = ["true\\pred".ljust(width) + " " + " ".join(l.rjust(width) for l in self.labels)]
        for label, row in zip(self.labels, self.counts):
            lines.append(label.ljust(width) + " " + " ".join(str(c).rjust(width) for c in row))
        return "\n".join(lines) + "\n"


def confusion(preds, truths, n_classes: int, labels=()) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truths = np.asarray(truths, dtype=np.int64).ravel()
    if preds.shape != truths.shape:
        raise ShapeError(f"{preds.size} predictions for {truths.size} truths")
    for name, arr in (("prediction", preds), ("truth", truths)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise LabelError(f"{name} index out of range for {n_classes} classes")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    return ConfusionMatrix(counts, labels)


@dataclass
class Metrics:
    accuracy: float
    balanced_accuracy: float
    macro_f1: float
    per_class: dict = field(default_factory=dict)
    n_examples: int = 0

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "balanced_accuracy": self.balanced_accuracy,
                "macro_f1": self.macro_f1, "per_class": self.per_class, "n_examples": self.n_examples}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _safe_div(num, den):
    return np.divide(num, den, out=np.zeros(num.shape, dtype=np.float64), where=den > 0)


def compute_metrics(cm: ConfusionMatrix) -> Metrics:
    """Derive all metrics from a confusion matrix.

    Zero denominators give 0 precision/recall/F1. Balanced accuracy and macro
    F1 average only over classes that have support.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise EmptyEval("cannot compute metrics on an empty confusion matrix")
    diag = np.diag(counts)
    support = counts.sum(axis=1)
    recall = _safe_div(diag, support)
    precision = _safe_div(diag, counts.sum(axis=0))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    supported = support > 0
    per_class = {
        label: {"precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
        for label, p, r, f, s in zip(cm.labels, precision, recall, f1, support)
    }
    return Metrics(float(diag.sum() / total), float(recall[supported].mean()),
                   float(f1[supported].mean()), per_class, int(total))


def evaluate_features(model, features, batch_size: int = 16):
    """Eval-mode metrics for an already-featurized split."""
    from .training import label_indices, predict_indices

    truths = label_indices(features.labels, model.label_set)
    preds = predict_indices(model, features, batch_size)
    cm = confusion(preds, truths, len(model.label_set), model.label_set)
    return compute_metrics(cm), cm


def evaluate(ckpt, manifest, split: str = "test"):
    """Metrics and confusion matrix of a checkpoint on one manifest split."""
    from .pipeline import Featurizer, featurize_split

    if split not in ("train", "val", "test"):
        raise ConfigError(f"split must be train, val or test, got {split!r}")
    unknown = sorted({r.label for r in manifest.records} - set(ckpt.label_set))
    if unknown:
        raise LabelError(f"manifest labels {unknown} are not in the checkpoint's label set "
                         f"{list(ckpt.label_set)}; swap the head first")
    cfg = ckpt.model_config
    if cfg.pathway == "spectrogram" and ckpt.frontend_stats is None:
        raise ConfigError("spectrogram checkpoint carries no frontend statistics")
    featurizer = Featurizer(cfg.pathway, ckpt.spectrogram_config, ckpt.frontend_stats)
    features = featurize_split(manifest, split, featurizer)
    features.patch_size, features.patch_stride = cfg.patch_size, cfg.patch_stride
    return evaluate_features(ckpt.to_model(), features)
