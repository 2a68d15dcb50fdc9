"""Prediction and the evaluation protocols: balanced accuracy, common/rare
breakdown, and cross-modality report lists."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .head import HeadParams, forward
from .store import EmbeddingDataset, FrequencyPartition


@dataclass
class EvalReport:
    """Evaluation summary for one dataset.

    ``per_class_recall`` has one entry per class-table class; classes with
    no ground-truth samples hold NaN, are listed in ``excluded_classes``,
    and never enter any of the averages. Confusion rows are ground truth,
    columns are predictions.
    """

    balanced_accuracy: float
    accuracy: float
    per_class_recall: np.ndarray
    confusion: np.ndarray
    common_balanced_acc: Optional[float]
    rare_balanced_acc: Optional[float]
    n_evaluated: int
    excluded_classes: List[int]
    modality: Optional[str] = None

    def to_json_dict(self) -> dict:
        recall = [
            None if not np.isfinite(r) else float(r) for r in self.per_class_recall
        ]
        return {
            "balanced_accuracy": self.balanced_accuracy,
            "accuracy": self.accuracy,
            "per_class_recall": recall,
            "confusion": self.confusion.astype(int).tolist(),
            "common": self.common_balanced_acc,
            "rare": self.rare_balanced_acc,
            "n": self.n_evaluated,
            "excluded_classes": self.excluded_classes,
            "modality": self.modality,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    def render_table(self, class_names: Optional[Sequence[str]] = None) -> str:
        lines = []
        if self.modality:
            lines.append(f"modality: {self.modality}")
        lines.append(f"samples evaluated: {self.n_evaluated}")
        lines.append(f"balanced accuracy: {self.balanced_accuracy:.4f}")
        lines.append(f"raw accuracy:      {self.accuracy:.4f}")
        if self.common_balanced_acc is not None:
            lines.append(f"common classes:    {self.common_balanced_acc:.4f}")
        if self.rare_balanced_acc is not None:
            lines.append(f"rare classes:      {self.rare_balanced_acc:.4f}")
        lines.append("per-class recall:")
        for class_id, recall in enumerate(self.per_class_recall):
            name = class_names[class_id] if class_names else f"class {class_id}"
            shown = "absent" if not np.isfinite(recall) else f"{recall:.4f}"
            lines.append(f"  {name:<24} {shown}")
        return "\n".join(lines)


def predict(params: HeadParams, dataset: EmbeddingDataset) -> np.ndarray:
    """Argmax class index per row; ties go to the lowest index."""
    if dataset.dim != params.dim:
        raise ValidationError(
            f"dataset dim {dataset.dim} != params dim {params.dim}"
        )
    logits, _ = forward(params, dataset.embeddings.astype(np.float64))
    return np.argmax(logits, axis=1)


def balanced_accuracy(preds: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Mean per-class recall over the classes present in ``labels``."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0:
        raise ValidationError("cannot score an empty prediction list")
    if preds.shape != labels.shape:
        raise ValidationError(f"got {preds.size} predictions for {labels.size} labels")
    recalls = _per_class_recall(preds, labels, n_classes)
    present = np.isfinite(recalls)
    return float(recalls[present].mean())


def _per_class_recall(preds: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    correct = np.bincount(labels[preds == labels], minlength=n_classes)
    recalls = np.full(n_classes, np.nan)
    present = counts > 0
    recalls[present] = correct[present] / counts[present]
    return recalls


def _subset_mean(recalls: np.ndarray, ids: Sequence[int]) -> Optional[float]:
    values = [recalls[i] for i in sorted(ids) if np.isfinite(recalls[i])]
    if not values:
        return None
    return float(np.mean(values))


def evaluate(
    params: HeadParams,
    dataset: EmbeddingDataset,
    partition: Optional[FrequencyPartition] = None,
) -> EvalReport:
    """Full report; the common/rare breakdown uses the training-set partition."""
    preds = predict(params, dataset)
    labels = dataset.labels
    if preds.size == 0:
        raise ValidationError("cannot evaluate an empty dataset")
    n_classes = dataset.n_classes
    recalls = _per_class_recall(preds, labels, n_classes)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    present = np.isfinite(recalls)
    common = rare = None
    if partition is not None:
        common = _subset_mean(recalls, partition.common_ids)
        rare = _subset_mean(recalls, partition.rare_ids)
    return EvalReport(
        balanced_accuracy=float(recalls[present].mean()),
        accuracy=float((preds == labels).mean()),
        per_class_recall=recalls,
        confusion=confusion,
        common_balanced_acc=common,
        rare_balanced_acc=rare,
        n_evaluated=int(preds.size),
        excluded_classes=[int(i) for i in np.flatnonzero(~present)],
        modality=dataset.meta.get("modality"),
    )


def cross_modality_eval(
    params: HeadParams,
    datasets: Sequence[EmbeddingDataset],
    class_names: Optional[Sequence[str]] = None,
    partition: Optional[FrequencyPartition] = None,
) -> List[EvalReport]:
    """One report per dataset, tagged with its modality.

    Every dataset must carry the training class table verbatim (same names,
    same order); mismatches raise instead of being remapped silently.
    """
    if not datasets:
        return []
    reference = list(class_names) if class_names is not None else datasets[0].class_names
    for dataset in datasets:
        if dataset.class_names != reference:
            raise ValidationError(
                "class table mismatch: expected "
                f"{reference}, got {dataset.class_names}"
            )
    return [evaluate(params, dataset, partition) for dataset in datasets]
