"""Accuracy, confusion matrices and their text / CSV renderings."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as D
from .adapt import predict_proba
from .autodiff import ContractError
from .checkpoint import atomic_write
from .nn import Model


# ---------------------------------------------------------------- evaluation


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = reference, columns = prediction
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(reference: np.ndarray, predicted: np.ndarray, class_names: Sequence[str]) -> ConfusionMatrix:
    k = len(class_names)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (np.asarray(reference), np.asarray(predicted)), 1)
    return ConfusionMatrix(counts, tuple(class_names))


def normalize_confusion(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized matrix plus a mask of rows that had no examples (left all-zero)."""
    counts = cm.counts.astype(np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    empty = sums[:, 0] == 0
    out = np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)
    return out, empty


@dataclass
class EvaluationReport:
    domain: str
    model: str  # "non-adapted" or "adapted"
    accuracy: float
    per_device: dict[str, float]
    confusion: ConfusionMatrix
    metadata: dict = field(default_factory=dict)

    @property
    def normalized(self) -> np.ndarray:
        return normalize_confusion(self.confusion)[0]

    def to_dict(self) -> dict:
        norm, empty = normalize_confusion(self.confusion)
        return {
            "domain": self.domain,
            "model": self.model,
            "accuracy": self.accuracy,
            "per_device": dict(sorted(self.per_device.items())),
            "n_examples": self.confusion.total,
            "class_names": list(self.confusion.class_names),
            "confusion": self.confusion.counts.tolist(),
            "confusion_normalized": norm.tolist(),
            "empty_rows": [int(i) for i in np.flatnonzero(empty)],
            "metadata": self.metadata,
        }


def evaluate(mapper: Model, classifier: Model, dataset: D.DomainDataset, model: str = "non-adapted",
             metadata: dict | None = None, batch_size: int = 256) -> EvaluationReport:
    """Classify ``dataset`` with classifier(mapper(x)); argmax ties go to the lowest class index."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    if mapper.training or classifier.training:
        raise ContractError("evaluate needs models in evaluation mode")
    reference = dataset.evaluation_labels()
    predicted = predict_proba(mapper, classifier, dataset.features, batch_size).argmax(axis=1)
    correct = predicted == reference
    per_device = {str(dev): float(correct[dataset.devices == dev].mean()) for dev in np.unique(dataset.devices)}
    return EvaluationReport(dataset.role, model, float(correct.mean()), per_device,
                            confusion(reference, predicted, dataset.class_names), dict(metadata or {}))


def render_confusion(cm: ConfusionMatrix, normalized: bool = True) -> str:
    values = normalize_confusion(cm)[0] if normalized else cm.counts
    names = [n[:12] for n in cm.class_names]
    width = max(7, max(len(n) for n in names) + 1)
    lines = [" " * width + "".join(n.rjust(width) for n in names)]
    for name, row in zip(names, values):
        cells = (f"{v:.3f}" if normalized else str(v) for v in row)
        lines.append(name.ljust(width) + "".join(c.rjust(width) for c in cells))
    return "\n".join(lines)


def write_confusion_csv(cm: ConfusionMatrix, path: str | Path, normalized: bool = False) -> None:
    values = normalize_confusion(cm)[0] if normalized else cm.counts
    with atomic_write(path, "w") as fh:
        w = csv.writer(fh)
        w.writerow(["reference"] + list(cm.class_names))
        for name, row in zip(cm.class_names, values):
            w.writerow([name] + [repr(float(v)) if normalized else int(v) for v in row])


def accuracy_table(reports: Sequence[EvaluationReport]) -> str:
    """Source/target rows by non-adapted/adapted columns."""
    acc = {(r.domain, r.model): r.accuracy for r in reports}
    lines = [f"{'':8}{'Non adapted':>14}{'Adapted':>10}"]
    for domain in ("source", "target"):
        cells = [acc.get((domain, m)) for m in ("non-adapted", "adapted")]
        lines.append(f"{domain.capitalize():8}" + "".join(
            f"{'-' if v is None else f'{100 * v:.2f}%':>{w}}" for v, w in zip(cells, (14, 10))))
    return "\n".join(lines)
