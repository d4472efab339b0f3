"""Geometric augmentation: rotation, horizontal flip, then random resized crop.

All three steps are folded into a single inverse affine map and sampled with
``grid_sample`` (bilinear for pixels, nearest for masks, zero fill).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from persrep.dataset import ImageRecord

MAX_ROTATION_DEG = 30.0
CROP_AREA_RANGE = (0.6, 1.0)
FLIP_P = 0.5


@dataclass(frozen=True)
class AugmentParams:
    angle_deg: float = 0.0
    flip: bool = False
    area: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)  # crop centre (row, col) in [-1, 1] units

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentParams":
        angle = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
        flip = bool(rng.random() < FLIP_P)
        area = float(rng.uniform(*CROP_AREA_RANGE))
        slack = 1.0 - math.sqrt(area)
        center = (float(rng.uniform(-slack, slack)), float(rng.uniform(-slack, slack)))
        return cls(angle, flip, area, center)


def affine_matrix(p: AugmentParams, h: int, w: int) -> np.ndarray:
    """2x3 map from output normalized coords (x, y) to input normalized coords."""
    k = math.sqrt(p.area)
    cy, cx = p.center
    # crop: v = c + k u
    crop = np.array([[k, 0, cx], [0, k, cy], [0, 0, 1]], dtype=np.float64)
    flip = np.diag([-1.0 if p.flip else 1.0, 1.0, 1.0])
    # rotation in pixel units so non-square images rotate rigidly
    to_px = np.diag([w / 2, h / 2, 1.0])
    t = math.radians(p.angle_deg)
    rot_inv = np.array([[math.cos(t), math.sin(t), 0], [-math.sin(t), math.cos(t), 0], [0, 0, 1]])
    rot = np.linalg.inv(to_px) @ rot_inv @ to_px
    return (rot @ flip @ crop)[:2]


def warp(batch: torch.Tensor, params: list[AugmentParams], mode: str = "bilinear") -> torch.Tensor:
    """Apply per-sample augmentations to a (B, C, H, W) float batch."""
    b, _, h, w = batch.shape
    theta = torch.as_tensor(np.stack([affine_matrix(p, h, w) for p in params]), dtype=batch.dtype)
    grid = F.affine_grid(theta, list(batch.shape), align_corners=False)
    return F.grid_sample(batch, grid, mode=mode, padding_mode="zeros", align_corners=False)


def apply_augment(image: ImageRecord, params: AugmentParams) -> ImageRecord:
    px = torch.from_numpy(np.asarray(image.pixels, dtype=np.float32)).permute(2, 0, 1)[None]
    out = warp(px, [params])[0].permute(1, 2, 0).round().clamp(0, 255).to(torch.uint8).numpy()
    mask = None
    if image.mask is not None:
        m = torch.from_numpy(image.mask.astype(np.float32))[None, None]
        mask = warp(m, [params], mode="nearest")[0, 0].numpy() > 0.5
    return ImageRecord(id=image.id, pixels=out, instance_id=image.instance_id, split=image.split,
                       scene_tag=image.scene_tag, mask=mask)


def augment(image: ImageRecord, rng_seed: int, return_params: bool = False):
    params = AugmentParams.sample(np.random.default_rng(rng_seed))
    out = apply_augment(image, params)
    return (out, params) if return_params else out
