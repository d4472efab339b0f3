"""Patch-similarity localisation: target features, confidence maps, Otsu masks."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from persrep import errors
from persrep.dataset import ImageRecord, mask_to_bbox
from persrep.encoder import EmbeddingBundle, Encoder, embed
from persrep.imageops import resize_mask, upscale_map

log = logging.getLogger(__name__)

OTSU_BINS = 256
CELL_OVERLAP = 0.5


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    values: np.ndarray                      # (h, w) cosine similarities
    source_image_id: str
    upscaled: Optional[np.ndarray] = None   # (H, W)


@dataclass(frozen=True, eq=False)
class DensePrediction:
    mask: np.ndarray
    bbox: Optional[tuple[int, int, int, int]]
    mask_score: float
    box_score: float

    @property
    def detected(self) -> bool:
        return self.bbox is not None


def _unit(v: np.ndarray, axis=-1) -> np.ndarray:
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(n, 1e-12)


def selected_cells(mask: np.ndarray, input_size: int, patch_size: int) -> np.ndarray:
    """Patch cells whose area is more than half covered by ``mask`` at encoder resolution."""
    m = resize_mask(mask, (input_size, input_size))
    pad = (-input_size) % patch_size
    if pad:
        m = np.pad(m, ((0, pad), (0, pad)))
    g = m.shape[0] // patch_size
    counts = m.reshape(g, patch_size, g, patch_size).sum(axis=(1, 3))
    return counts > CELL_OVERLAP * patch_size * patch_size


def target_feature(d_r: Sequence[ImageRecord], encoder: Encoder,
                   bundles: Optional[Sequence[EmbeddingBundle]] = None) -> np.ndarray:
    """Unit-normalised mean over train images of their mean masked patch embedding."""
    if any(r.mask is None for r in d_r):
        raise errors.MissingMasks("target feature needs masks on every reference image")
    bundles = bundles if bundles is not None else encoder.embed_batch([r.pixels for r in d_r])
    per_image = []
    for rec, b in zip(d_r, bundles):
        cells = selected_cells(rec.mask, encoder.descriptor.input_size, b.patch_size)
        if cells.any():
            per_image.append(b.patches[cells].mean(axis=0))
    if not per_image:
        raise errors.EmptyMaskAfterDownscale("no patch cell is covered by any reference mask")
    return _unit(np.mean(per_image, axis=0))


def confidence_map(test: ImageRecord, target: np.ndarray, encoder: Optional[Encoder] = None,
                   bundle: Optional[EmbeddingBundle] = None) -> ConfidenceMap:
    bundle = bundle if bundle is not None else embed(encoder, test)
    values = np.clip(_unit(bundle.patches) @ _unit(np.asarray(target, dtype=np.float64)), -1.0, 1.0)
    return ConfidenceMap(values, test.id, upscale_map(values, test.shape))


def otsu_binarize(values, on_constant: str = "warn") -> tuple[float, np.ndarray]:
    """Otsu threshold over a 256-bin histogram spanning ``[min, max]``.

    The returned threshold is the smallest value in the upper class, so
    ``binary == (values >= threshold)`` holds exactly and the threshold lies in
    ``(min, max]``. Ties between candidate bins go to the lowest bin.
    """
    if isinstance(values, ConfidenceMap):
        values = values.upscaled if values.upscaled is not None else values.values
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        if on_constant == "error":
            raise errors.ConstantMap("confidence map is constant")
        log.warning("constant confidence map; predicting nothing")
        return float("inf"), np.zeros(v.shape, dtype=bool)
    bins = histogram_bins(v, lo, hi)
    hist = np.bincount(bins.ravel(), minlength=OTSU_BINS)
    idx = np.arange(OTSU_BINS)
    w0s = np.cumsum(hist)
    s0s = np.cumsum(hist * idx)
    n, s = int(w0s[-1]), int(s0s[-1])
    best_k, best = None, -1.0
    for k in range(1, OTSU_BINS):
        w0, s0 = int(w0s[k - 1]), int(s0s[k - 1])
        w1, s1 = n - w0, s - s0
        if w0 == 0 or w1 == 0:
            continue
        between = between_class_variance(w0, s0, w1, s1)
        if between > best:
            best, best_k = between, k
    upper = bins >= best_k
    return float(v[upper].min()), upper


def histogram_bins(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.minimum(((v - lo) / (hi - lo) * OTSU_BINS).astype(np.int64), OTSU_BINS - 1)


def between_class_variance(w0: int, s0: int, w1: int, s1: int) -> float:
    """``w0 w1 (mu0 - mu1)^2`` up to the constant ``1/N^2``, from integer bin sums."""
    num = (s0 * w1 - s1 * w0) ** 2
    return num / (w0 * w1)


def dense_predict(test: ImageRecord, target: np.ndarray, encoder: Optional[Encoder] = None,
                  bundle: Optional[EmbeddingBundle] = None, on_constant: str = "warn") -> DensePrediction:
    """Segment and box the target in ``test``; all-false masks become the -1 sentinel."""
    cmap = confidence_map(test, target, encoder, bundle)
    return predict_from_map(cmap.upscaled, on_constant)


def predict_from_map(up: np.ndarray, on_constant: str = "warn") -> DensePrediction:
    _thr, mask = otsu_binarize(up, on_constant)
    if not mask.any():
        return DensePrediction(mask, None, -1.0, -1.0)
    box = mask_to_bbox(mask)
    r0, c0, r1, c1 = box
    return DensePrediction(mask, box, float(up[mask].mean()), float(up[r0:r1 + 1, c0:c1 + 1].mean()))
