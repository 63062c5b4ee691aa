"""Evaluation metrics: grounding accuracy at an IoU threshold plus mean IoU,
and relation-classification F1/accuracy/top-k.

Conventions, pinned because they move the aggregates:
* a failed grounding counts as IoU 0 (it stays in the denominator),
* a prediction is correct when it reaches the IoU threshold against any
  annotated acceptable box for that expression,
* per-class F1 is 0 when precision + recall is 0,
* macro-F1 is the unweighted mean of per-class F1s; micro-F1 pools TP/FP/FN.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataio import BBox2D, MULTICLASS, RelationVocabulary
from .errors import EmptySet, LengthMismatch, ParseError, ValidationError
from .geometry import iou_2d


@dataclass
class GroundingMetrics:
    acc_at_threshold: float  # percentage
    mean_iou: float
    n: int
    iou_threshold: float = 0.5


@dataclass
class ClassificationMetrics:
    per_relation_f1: dict[str, float]
    micro_f1: float
    macro_f1: float
    accuracy: float  # percentage
    topk: dict[int, float] = field(default_factory=dict)  # k -> percentage
    n: int = 0


def eval_grounding(
    predictions: Sequence[Optional[BBox2D]],
    ground_truths: Sequence[Sequence[BBox2D]],
    iou_threshold: float = 0.5,
) -> GroundingMetrics:
    """Accuracy at the IoU threshold and mean IoU.  Each ground-truth entry
    is the set of acceptable boxes; the best match counts.  None predictions
    (failed groundings) score IoU 0."""
    if len(predictions) != len(ground_truths):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(ground_truths)} ground truths")
    if not predictions:
        raise EmptySet("no grounding results to evaluate")
    ious = []
    for pred, gts in zip(predictions, ground_truths):
        if not gts:
            raise ValidationError("ground-truth entry with no boxes")
        if pred is None:
            ious.append(0.0)
        else:
            ious.append(max(iou_2d(pred, gt) for gt in gts))
    ious_arr = np.array(ious)
    return GroundingMetrics(
        acc_at_threshold=float(100.0 * np.mean(ious_arr >= iou_threshold)),
        mean_iou=float(np.mean(ious_arr)),
        n=len(ious),
        iou_threshold=iou_threshold,
    )


def _f1_from_counts(tp: float, fp: float, fn: float) -> float:
    # 2TP/(2TP+FP+FN); 0 when the denominator is 0 (never predicted, never
    # true), which is exactly the P+R=0 -> F1=0 convention.
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom > 0 else 0.0


def eval_classification(
    probs: np.ndarray,
    labels: np.ndarray,
    vocabulary: RelationVocabulary,
    threshold: float = 0.5,
    topk: Sequence[int] = (1, 2),
) -> ClassificationMetrics:
    """Relation-classification metrics.

    Multiclass: predictions are the argmax row per sample, labels an int
    array (N,); accuracy is top-1 and micro-F1 equals it by construction.
    Multilabel: predictions threshold each sigmoid at `threshold`, labels a
    bool array (N, C); accuracy is exact-set match.  Top-k asks whether a
    true label appears among the k most probable relations (ties broken by
    lower index)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != len(vocabulary):
        raise ValidationError("probs: expected shape (n, |vocabulary|)")
    if probs.shape[0] == 0:
        raise EmptySet("no predictions to evaluate")
    if probs.shape[0] != np.asarray(labels).shape[0]:
        raise LengthMismatch(f"{probs.shape[0]} predictions vs {len(labels)} labels")

    n, c = probs.shape
    order = np.argsort(-probs, axis=1, kind="stable")

    if vocabulary.mode == MULTICLASS:
        labels = np.asarray(labels, dtype=np.int64)
        pred = order[:, 0]
        onehot_pred = np.zeros((n, c), dtype=bool)
        onehot_pred[np.arange(n), pred] = True
        onehot_true = np.zeros((n, c), dtype=bool)
        onehot_true[np.arange(n), labels] = True
        pred_mat, true_mat = onehot_pred, onehot_true
        accuracy = float(100.0 * np.mean(pred == labels))
        topk_acc = {
            int(k): float(100.0 * np.mean((order[:, :k] == labels[:, None]).any(axis=1)))
            for k in topk
            if 1 <= k <= c
        }
    else:
        labels = np.asarray(labels, dtype=bool)
        if labels.shape != (n, c):
            raise ValidationError("multilabel labels: expected bool array (n, |vocabulary|)")
        pred_mat = probs >= threshold
        true_mat = labels
        accuracy = float(100.0 * np.mean((pred_mat == true_mat).all(axis=1)))
        has_label = true_mat.any(axis=1)
        topk_acc = {}
        for k in topk:
            if not (1 <= k <= c):
                continue
            hits = np.array(
                [true_mat[i, order[i, :k]].any() if has_label[i] else False for i in range(n)]
            )
            topk_acc[int(k)] = float(100.0 * np.mean(hits))

    tp = (pred_mat & true_mat).sum(axis=0).astype(np.float64)
    fp = (pred_mat & ~true_mat).sum(axis=0).astype(np.float64)
    fn = (~pred_mat & true_mat).sum(axis=0).astype(np.float64)

    per_f1 = {
        name: _f1_from_counts(tp[i], fp[i], fn[i]) for i, name in enumerate(vocabulary.names)
    }
    micro = _f1_from_counts(tp.sum(), fp.sum(), fn.sum())
    macro = float(np.mean(list(per_f1.values())))
    return ClassificationMetrics(
        per_relation_f1=per_f1,
        micro_f1=micro,
        macro_f1=macro,
        accuracy=accuracy,
        topk=topk_acc,
        n=n,
    )


# ---------------------------------------------------------------------------
# Reports


def report_grounding(m: GroundingMetrics, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(
            {
                "acc_at_threshold": m.acc_at_threshold,
                "iou_threshold": m.iou_threshold,
                "mean_iou": m.mean_iou,
                "n": m.n,
            },
            indent=2,
            sort_keys=True,
        ) + "\n"
    lines = [
        f"grounding over {m.n} expressions",
        f"  acc@{m.iou_threshold:g}: {m.acc_at_threshold:.2f}%",
        f"  mean IoU: {m.mean_iou:.4f}",
    ]
    return "\n".join(lines) + "\n"


def report_classification(m: ClassificationMetrics, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(
            {
                "per_relation_f1": m.per_relation_f1,
                "micro_f1": m.micro_f1,
                "macro_f1": m.macro_f1,
                "accuracy": m.accuracy,
                "topk": {str(k): v for k, v in sorted(m.topk.items())},
                "n": m.n,
            },
            indent=2,
            sort_keys=True,
        ) + "\n"
    names = list(m.per_relation_f1)
    w = max(8, max(len(n) for n in names) + 2)
    header = "".join(f"{n:>{w}}" for n in names) + f"{'micro':>{w}}{'macro':>{w}}{'acc':>{w}}"
    values = "".join(f"{100 * m.per_relation_f1[n]:>{w}.2f}" for n in names)
    values += f"{100 * m.micro_f1:>{w}.2f}{100 * m.macro_f1:>{w}.2f}{m.accuracy:>{w}.2f}"
    lines = [f"relation classification over {m.n} samples (F1 % / acc %)", header, values]
    if m.topk:
        lines.append("  ".join(f"top-{k}: {v:.2f}%" for k, v in sorted(m.topk.items())))
    return "\n".join(lines) + "\n"


def parse_classification_report(text: str) -> dict:
    """Parse the machine-readable classification report back to numbers."""
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"bad classification report: {e}") from e
