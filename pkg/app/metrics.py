"""
Precision-recall curve and step-wise average precision.

Scores are sorted descending (stable, so ties keep their original order) and
tied scores are compressed into one bucket: a threshold admits all of them
or none. AP = sum over buckets of (R_k - R_{k-1}) * P_k.
"""
from typing import List, Sequence, Tuple

import numpy as np

from app.errors import ContractError, UndefinedMetricError


def _validate(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size == 0:
        raise ContractError("metric needs at least one example")
    if scores.size != labels.size:
        raise ContractError(f"{scores.size} scores for {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    if not np.isfinite(scores).all():
        raise ContractError("scores must be finite")
    if labels.sum() == 0:
        raise UndefinedMetricError("AUPRC is undefined without positive labels")
    return scores, labels.astype(np.int64)


def _buckets(scores: np.ndarray, labels: np.ndarray):
    order = np.argsort(-scores, kind="stable")
    sorted_scores, sorted_labels = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(sorted_scores[:-1] != sorted_scores[1:], True))
    tp = np.cumsum(sorted_labels)[ends]
    predicted = ends + 1
    return tp, predicted, sorted_scores[ends]


def pr_curve(scores: Sequence[float], labels: Sequence[int]) -> List[Tuple[float, float, float]]:
    """(precision, recall, threshold) for each distinct score, highest threshold first"""
    scores, labels = _validate(scores, labels)
    tp, predicted, thresholds = _buckets(scores, labels)
    n_pos = labels.sum()
    return [
        (float(t / p), float(t / n_pos), float(s))
        for t, p, s in zip(tp, predicted, thresholds)
    ]


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision in [0, 1]"""
    scores, labels = _validate(scores, labels)
    tp, predicted, _ = _buckets(scores, labels)
    hits = np.diff(np.concatenate([[0], tp]))
    return float(np.sum(hits * (tp / predicted)) / labels.sum())


def curve_area(points: Sequence[Tuple[float, float, float]]) -> float:
    """Step-wise area under a pr_curve; equals auprc of the same inputs"""
    area, previous = 0.0, 0.0
    for precision, recall, _ in points:
        area += (recall - previous) * precision
        previous = recall
    return area
