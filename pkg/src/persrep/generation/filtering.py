"""Perceptual filtering of generated positives against masked real references."""
from __future__ import annotations

import logging
from dataclasses import replace
from typing import Callable, Optional, Sequence

import numpy as np

from persrep import errors
from persrep.dataset import ImageRecord, SyntheticPool, mask_to_bbox

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.6

# maps an RGB crop to a unit-norm vector
PerceptualMetric = Callable[[np.ndarray], np.ndarray]
# predicts a boolean foreground mask for a generated image
Masker = Callable[[ImageRecord], np.ndarray]


def masked_crop(pixels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Tight bbox crop of ``pixels`` with background pixels zeroed."""
    r0, c0, r1, c1 = mask_to_bbox(mask)
    crop = np.array(pixels[r0:r1 + 1, c0:c1 + 1])
    crop[~mask[r0:r1 + 1, c0:c1 + 1]] = 0
    return crop


def own_mask_masker(rec: ImageRecord) -> np.ndarray:
    """Use the mask a generator attached to the image (Cut-and-Paste pools have one)."""
    if rec.mask is None or not rec.mask.any():
        raise errors.MaskerFailure(f"{rec.id} carries no usable mask")
    return rec.mask


def reference_embeddings(refs: Sequence[ImageRecord], metric: PerceptualMetric) -> np.ndarray:
    out = []
    for ref in refs:
        if ref.mask is None:
            raise errors.MissingMasks(f"reference {ref.id} has no mask")
        out.append(np.asarray(metric(masked_crop(ref.pixels, ref.mask)), dtype=np.float64))
    return np.stack(out)


def score_image(rec: ImageRecord, ref_embs: np.ndarray, metric: PerceptualMetric, masker: Masker) -> float:
    mask = np.asarray(masker(rec), dtype=bool)
    if mask.shape != rec.shape or not mask.any():
        raise errors.MaskerFailure(f"{rec.id}: masker returned an empty or misshaped mask")
    emb = np.asarray(metric(masked_crop(rec.pixels, mask)), dtype=np.float64)
    return float(np.max(ref_embs @ emb))


def filter_pool(
    pool: SyntheticPool,
    refs: Sequence[ImageRecord],
    metric: PerceptualMetric,
    masker: Masker = own_mask_masker,
    threshold: float = DEFAULT_THRESHOLD,
    *,
    scores: Optional[dict[str, float]] = None,
    on_masker_failure: str = "drop",
) -> SyntheticPool:
    """Keep positives whose best cosine score against the references is ``>= threshold``.

    ``scores`` injects precomputed per-image scores (keys are record ids) and
    skips the metric for those images. Negatives pass through untouched.
    Masker failures drop the image with a logged reason, or raise when
    ``on_masker_failure="error"``.
    """
    ref_embs = None
    kept = []
    provenance = dict(pool.provenance)
    for rec in pool.positives:
        if scores is not None and rec.id in scores:
            score = float(scores[rec.id])
        else:
            if ref_embs is None:
                ref_embs = reference_embeddings(refs, metric)
            try:
                score = score_image(rec, ref_embs, metric, masker)
            except errors.MaskerFailure as exc:
                if on_masker_failure == "error":
                    raise
                log.warning("dropping %s: %s", rec.id, exc)
                continue
        prov = provenance[rec.id]
        provenance[rec.id] = replace(prov, extra={**prov.extra, "filter_score": score})
        if score >= threshold:
            kept.append(rec)
    keep_ids = {r.id for r in kept} | {r.id for r in pool.negatives}
    return SyntheticPool(pool.instance_id, kept, pool.negatives,
                         {k: v for k, v in provenance.items() if k in keep_ids})
