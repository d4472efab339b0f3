"""Cut-and-Paste compositing of masked real foregrounds onto backgrounds."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from persrep import errors
from persrep.dataset import ImageRecord, mask_to_bbox
from persrep.imageops import resize_mask, resize_rgb

DEFAULT_SCALE_RANGE = (0.3, 1.3)


@dataclass(frozen=True)
class PasteParams:
    scale: float
    offset: tuple[int, int]
    size: tuple[int, int]
    retried: bool = False


def _scaled_size(crop_shape, s):
    h, w = crop_shape
    return max(1, int(round(h * s))), max(1, int(round(w * s)))


def cut_and_paste(
    fg: ImageRecord,
    bg: np.ndarray,
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE,
    rng_seed: int = 0,
    *,
    scale: Optional[float] = None,
    offset: Optional[tuple[int, int]] = None,
    record_id: Optional[str] = None,
    return_params: bool = False,
):
    """Paste the masked foreground of ``fg`` onto ``bg`` at a random scale and position.

    The tight mask crop is resized by ``s ~ U(scale_range)`` (bilinear pixels,
    nearest mask) and placed uniformly so it lies fully inside ``bg``. One
    re-draw of ``s`` is allowed when the scaled crop does not fit.
    Pixels outside the returned mask are exactly ``bg``.
    """
    if fg.mask is None:
        raise errors.MissingMasks(f"{fg.id}: Cut-and-Paste needs a foreground mask")
    r0, c0, r1, c1 = mask_to_bbox(fg.mask)
    crop_px = fg.pixels[r0:r1 + 1, c0:c1 + 1]
    crop_mask = fg.mask[r0:r1 + 1, c0:c1 + 1]
    bg = np.asarray(bg, dtype=np.uint8)
    H, W = bg.shape[:2]
    rng = np.random.default_rng(rng_seed)

    retried = False
    s = float(scale) if scale is not None else float(rng.uniform(*scale_range))
    nh, nw = _scaled_size(crop_mask.shape, s)
    if nh > H or nw > W:
        if scale is not None:
            raise errors.ForegroundTooLarge(f"crop {(nh, nw)} does not fit background {(H, W)}")
        retried = True
        s = float(rng.uniform(*scale_range))
        nh, nw = _scaled_size(crop_mask.shape, s)
        if nh > H or nw > W:
            raise errors.ForegroundTooLarge(f"crop {(nh, nw)} does not fit background {(H, W)} after retry")

    if offset is None:
        offset = (int(rng.integers(0, H - nh + 1)), int(rng.integers(0, W - nw + 1)))
    orow, ocol = offset
    if not (0 <= orow <= H - nh and 0 <= ocol <= W - nw):
        raise errors.ForegroundTooLarge(f"offset {offset} places crop out of bounds")

    m = resize_mask(crop_mask, (nh, nw))
    px = resize_rgb(crop_px, (nh, nw))
    out = bg.copy()
    mask = np.zeros((H, W), dtype=bool)
    mask[orow:orow + nh, ocol:ocol + nw] = m
    out[orow:orow + nh, ocol:ocol + nw][m] = px[m]
    if not mask.any():
        raise errors.EmptyMask(f"{fg.id}: foreground vanished at scale {s:.3f}")

    rec = ImageRecord(id=record_id or f"{fg.id}_cp", pixels=out, instance_id=fg.instance_id,
                      split="train", mask=mask)
    if return_params:
        return rec, PasteParams(s, (orow, ocol), (nh, nw), retried)
    return rec
