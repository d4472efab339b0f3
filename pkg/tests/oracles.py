"""Slow, obviously-correct reference implementations used to check the metrics."""
import math
from fractions import Fraction

import numpy as np


def pr_auc_oracle(scores, labels):
    # worst case among ties: every tied negative and every earlier tied positive ranks ahead
    scores, labels = list(map(float, scores)), list(map(bool, labels))
    precisions = []
    for i, (s, y) in enumerate(zip(scores, labels)):
        if not y:
            continue
        rank = tp = 0
        for j, (t, z) in enumerate(zip(scores, labels)):
            ahead = t > s or (t == s and (not z or j <= i))
            rank += ahead
            tp += ahead and z
        precisions.append(tp / rank)
    return sum(precisions) / len(precisions)


def ndcg_oracle(scores, rel):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], rel[i] > 0, i))
    dcg = sum(rel[i] / math.log2(r + 2) for r, i in enumerate(order))
    idcg = sum(v / math.log2(r + 2) for r, v in enumerate(sorted(rel, reverse=True)))
    return dcg / idcg


def otsu_oracle(values):
    v = [float(x) for x in np.asarray(values, dtype=np.float64).ravel()]
    lo, hi = min(v), max(v)
    bins = [min(int((x - lo) / (hi - lo) * 256), 255) for x in v]
    best, best_t = None, None
    for t in range(1, 256):
        up = [b for b in bins if b >= t]
        down = [b for b in bins if b < t]
        if not up or not down:
            continue
        gap = Fraction(sum(down), len(down)) - Fraction(sum(up), len(up))
        score = len(down) * len(up) * gap * gap
        if best is None or score > best:
            best, best_t = score, t
    upper = np.array([b >= best_t for b in bins]).reshape(np.shape(values))
    return min(x for x, b in zip(v, bins) if b >= best_t), upper


def _box_iou(a, b):
    ih = min(a[2], b[2]) - max(a[0], b[0]) + 1
    iw = min(a[3], b[3]) - max(a[1], b[1]) + 1
    inter = max(ih, 0) * max(iw, 0)
    area = lambda r: (r[2] - r[0] + 1) * (r[3] - r[1] + 1)  # noqa: E731
    return inter / (area(a) + area(b) - inter)


def _mask_iou(a, b):
    u = (a | b).sum()
    return (a & b).sum() / u if u else 0.0


def dense_oracle(predictions, gts, mode, iou_thresholds, f1_iou=0.5):
    """Enumerate every score threshold; at each one keep detections scoring at least that much."""
    iou = _box_iou if mode == "bbox" else _mask_iou
    n_gt = sum(len(g) for g in gts.values())
    dets = {k: p for k, p in predictions.items() if p is not None}
    thresholds = sorted({p[0] for p in dets.values()}, reverse=True)

    def curve(tau):
        pts = []
        for th in thresholds:
            kept = [(k, p) for k, p in dets.items() if p[0] >= th]
            # every image holds at most one detection, so matching is per image
            tp = sum(1 for k, p in kept if any(iou(p[1], g) >= tau for g in gts[k]))
            pts.append((tp / len(kept), tp / n_gt))
        return pts

    aps = []
    for tau in iou_thresholds:
        pts = curve(tau)
        ap, prev_r = 0.0, 0.0
        for i, (_, r) in enumerate(pts):
            ap += (r - prev_r) * max(p for p, _ in pts[i:])
            prev_r = r
        aps.append(ap)
    f1 = 0.0
    for p, r in curve(f1_iou):
        if p + r > 0:
            f1 = max(f1, 2 * p * r / (p + r))
    return sum(aps) / len(aps), f1


def random_dense_case(rng, mode, n_images=None, size=12):
    n_images = n_images or int(rng.integers(2, 9))
    preds, gts = {}, {}
    for i in range(n_images):
        key = f"im{i}"

        def region():
            r0, c0 = rng.integers(0, size - 2, size=2)
            r1, c1 = r0 + rng.integers(0, size - r0), c0 + rng.integers(0, size - c0)
            if mode == "bbox":
                return (int(r0), int(c0), int(r1), int(c1))
            m = np.zeros((size, size), bool)
            m[r0:r1 + 1, c0:c1 + 1] = rng.random((r1 - r0 + 1, c1 - c0 + 1)) < 0.8
            m[r0, c0] = True
            return m

        gts[key] = [region() for _ in range(int(rng.integers(0, 3)))]
        if rng.random() < 0.2:
            preds[key] = None
        else:
            # coarse scores so ties happen
            preds[key] = (float(rng.integers(0, 5)) / 4, region())
    if sum(len(g) for g in gts.values()) == 0:
        gts["im0"] = [preds["im0"][1] if preds["im0"] is not None else region()]
    return preds, gts
