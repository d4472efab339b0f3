"""Diversity and fidelity statistics for synthetic pools."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from persrep import errors
from persrep.dataset import ImageRecord, SyntheticPool, mask_to_bbox
from persrep.encoder import Encoder, global_feature
from persrep.imageops import crop_box

CROP_PAD = 0.10

Metric = Callable[[np.ndarray], np.ndarray]
Cropper = Callable[[ImageRecord], np.ndarray]


def encoder_metric(encoder: Encoder) -> Metric:
    """Perceptual metric backed by an encoder's unit-normalised global feature."""
    def metric(pixels: np.ndarray) -> np.ndarray:
        feat = global_feature(encoder.embed_batch([pixels])[0]).astype(np.float64)
        return feat / max(np.linalg.norm(feat), 1e-12)
    return metric


def object_crop(rec: ImageRecord, pad: float = CROP_PAD) -> np.ndarray:
    """Crop around the mask's tight box, grown by ``pad`` of its size on every side."""
    if rec.mask is None or not rec.mask.any():
        raise errors.MissingMasks(f"{rec.id} has no mask to crop around")
    return crop_box(rec.pixels, mask_to_bbox(rec.mask), pad=pad)


def _unit_rows(embs: np.ndarray) -> np.ndarray:
    return embs / np.maximum(np.linalg.norm(embs, axis=1, keepdims=True), 1e-12)


def fidelity(pool: SyntheticPool, refs: Sequence[ImageRecord], metric: Metric,
             cropper: Cropper = object_crop) -> tuple[list[float], float]:
    """Cosine of each positive's crop to the re-normalised mean reference embedding."""
    if not refs:
        raise errors.MissingMasks("fidelity needs at least one masked reference")
    ref = np.stack([np.asarray(metric(cropper(r)), dtype=np.float64) for r in refs])
    center = _unit_rows(_unit_rows(ref).mean(axis=0, keepdims=True))[0]
    if not pool.positives:
        return [], float("nan")
    embs = _unit_rows(np.stack([np.asarray(metric(cropper(r)), dtype=np.float64) for r in pool.positives]))
    per = [float(v) for v in np.clip(embs @ center, -1.0, 1.0)]
    return per, float(np.mean(per))


def pairwise_diversity(embs: np.ndarray) -> float:
    """``1 - mean cosine`` over unordered pairs of rows."""
    n = embs.shape[0]
    if n < 2:
        raise errors.PoolTooSmall(f"diversity needs two or more images, got {n}")
    unit = _unit_rows(np.asarray(embs, dtype=np.float64))
    gram = unit @ unit.T
    iu = np.triu_indices(n, k=1)
    return float(np.clip(1.0 - gram[iu].mean(), 0.0, 2.0))


def diversity(pool: SyntheticPool, metric: Metric) -> float:
    if len(pool.positives) < 2:
        raise errors.PoolTooSmall(f"pool {pool.instance_id} has {len(pool.positives)} positives")
    return pairwise_diversity(np.stack([np.asarray(metric(r.pixels), dtype=np.float64) for r in pool.positives]))


@dataclass(frozen=True)
class PoolAnalysis:
    fidelity_per_image: list
    fidelity_mean: float
    diversity: float
    pool_digest: str
    instance_id: str = ""

    def to_json(self) -> dict:
        return {"instance_id": self.instance_id, "pool_digest": self.pool_digest,
                "fidelity_mean": self.fidelity_mean, "diversity": self.diversity,
                "fidelity_per_image": list(self.fidelity_per_image)}

    @classmethod
    def from_json(cls, doc: dict) -> "PoolAnalysis":
        return cls(list(doc["fidelity_per_image"]), doc["fidelity_mean"], doc["diversity"],
                   doc["pool_digest"], doc.get("instance_id", ""))

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path


def analyze_pool(pool: SyntheticPool, refs: Sequence[ImageRecord], metric: Metric,
                 cropper: Cropper = object_crop) -> PoolAnalysis:
    per, mean = fidelity(pool, refs, metric, cropper)
    try:
        div = diversity(pool, metric)
    except errors.PoolTooSmall:
        div = float("nan")
    return PoolAnalysis(per, mean, div, pool.digest(), pool.instance_id)


def write_analysis_csv(analyses: Sequence[PoolAnalysis], path) -> Path:
    """One row per pool: ``instance_id, pool_digest, fidelity_mean, diversity``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "pool_digest", "fidelity_mean", "diversity"])
        for a in sorted(analyses, key=lambda a: (a.instance_id, a.pool_digest)):
            w.writerow([a.instance_id, a.pool_digest, repr(a.fidelity_mean), repr(a.diversity)])
    return path
