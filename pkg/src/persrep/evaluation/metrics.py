"""Rank and localisation metrics: PR-AUC, NDCG, IoU, AP/F1 for dense predictions.

Ties in scores are always resolved pessimistically: among equal scores the
irrelevant items rank first, then input order.
"""
from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence

import numpy as np

from persrep import errors

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def _worst_case_order(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # lexsort: last key is primary -> score descending, then negatives first, then input order
    return np.lexsort((labels.astype(int), -scores))


def pr_auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Non-interpolated average precision: mean precision at the rank of each positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise errors.EvaluationError(f"{scores.shape[0]} scores vs {labels.shape[0]} labels")
    if not labels.any():
        raise errors.NoPositives("no positive labels")
    ranked = labels[_worst_case_order(scores, labels)]
    tp = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1
    return float(np.mean(tp[ranked] / ranks))


def ndcg(scores: Sequence[float], relevance: Sequence[float]) -> float:
    """Full-ranking NDCG with linear gain and ``1 / log2(rank + 1)`` discount."""
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevance, dtype=np.float64)
    if scores.size == 0:
        raise errors.EmptyRetrievalSet("nothing to rank")
    if scores.shape != rel.shape:
        raise errors.EvaluationError("scores and relevance differ in length")
    if not (rel > 0).any():
        raise errors.EmptyRelevance("no relevant item in the retrieval set")
    discount = 1.0 / np.log2(np.arange(2, rel.size + 2))
    dcg = float(np.sum(rel[_worst_case_order(scores, rel > 0)] * discount))
    idcg = float(np.sum(np.sort(rel)[::-1] * discount))
    return dcg / idcg


def box_iou(a, b) -> float:
    """IoU of two inclusive integer boxes (row_min, col_min, row_max, col_max)."""
    r0, c0 = max(a[0], b[0]), max(a[1], b[1])
    r1, c1 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0, r1 - r0 + 1) * max(0, c1 - c0 + 1)
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / float(area_a + area_b - inter)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def _iou(mode: str, pred, gt) -> float:
    return box_iou(pred, gt) if mode == "bbox" else mask_iou(pred, gt)


def _match(mode, dets, gts, tau):
    """Greedy score-descending matching; returns TP flags in detection order."""
    matched = {k: [False] * len(v) for k, v in gts.items()}
    flags = []
    for _score, key, region in dets:
        best, best_j = -1.0, None
        for j, g in enumerate(gts[key]):
            if matched[key][j]:
                continue
            iou = _iou(mode, region, g)
            if iou > best:
                best, best_j = iou, j
        hit = best_j is not None and best >= tau
        if hit:
            matched[key][best_j] = True
        flags.append(hit)
    return np.asarray(flags, dtype=bool)


def _group_ends(sorted_scores: np.ndarray) -> np.ndarray:
    """Index of the last element of each run of equal scores."""
    if sorted_scores.size == 0:
        return np.zeros(0, dtype=int)
    change = np.flatnonzero(np.diff(sorted_scores) != 0)
    return np.append(change, sorted_scores.size - 1)


def _pr_points(flags: np.ndarray, scores: np.ndarray, n_gt: int):
    ends = _group_ends(scores)
    tp = np.cumsum(flags)[ends]
    n_det = ends + 1
    return tp / n_det, tp / n_gt


def _interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the precision envelope (all-point interpolation)."""
    if recall.size == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def dense_ap_f1(
    predictions: Mapping[str, Optional[tuple[float, object]]],
    gts: Mapping[str, Sequence[object]],
    mode: str = "bbox",
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    f1_iou: float = 0.5,
) -> tuple[float, float]:
    """AP averaged over IoU thresholds, and best F1 over score thresholds at ``f1_iou``.

    ``predictions[image] = (score, region)`` or ``None`` for "no detection";
    regions are boxes in ``bbox`` mode and boolean masks in ``mask`` mode.
    ``gts[image]`` lists that image's ground-truth regions (possibly none).
    """
    if set(predictions) != set(gts):
        raise errors.MismatchedImageSets("predictions and ground truth cover different images")
    if mode not in ("bbox", "mask"):
        raise errors.EvaluationError(f"unknown mode {mode!r}")
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        raise errors.EvaluationError("no ground-truth objects")
    dets = [(float(p[0]), k, p[1]) for k, p in sorted(predictions.items()) if p is not None]
    dets.sort(key=lambda d: -d[0])
    scores = np.array([d[0] for d in dets])

    aps = []
    for tau in iou_thresholds:
        flags = _match(mode, dets, gts, tau)
        p, r = _pr_points(flags, scores, n_gt)
        aps.append(_interpolated_ap(p, r))

    flags = _match(mode, dets, gts, f1_iou)
    p, r = _pr_points(flags, scores, n_gt)
    denom = p + r
    f1 = np.where(denom > 0, 2 * p * r / np.where(denom > 0, denom, 1), 0.0)
    return float(np.mean(aps)), float(f1.max()) if f1.size else 0.0
