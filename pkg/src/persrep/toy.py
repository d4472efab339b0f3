"""Procedural toy world: category sprites, instance appearances, scenes.

Gives a desk-scale stand-in for a real instance dataset (3 train images per
object, test images under pose change, clutter and new backgrounds) and for
the generic-category negatives a text-to-image model would produce.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from persrep.dataset import ImageRecord, InstanceDataset, InstanceEntry
from persrep.generation.backgrounds import procedural_texture

CATEGORIES = ("mug", "bottle")
PATTERNS = ("hstripes", "vstripes", "checker", "dots")
TEST_SCENES = ("id", "pose", "distractors", "both", "pose", "both")
IMAGE_SIZE = 64
# sprites are drawn at this multiple of the canonical silhouette size
SPRITE_SCALE = 1.7


@dataclass(frozen=True)
class Appearance:
    category: str
    primary: tuple[int, int, int]
    secondary: tuple[int, int, int]
    pattern: str
    period: int

    @classmethod
    def random(cls, category: str, rng: np.random.Generator) -> "Appearance":
        c1 = tuple(int(v) for v in rng.integers(20, 236, size=3))
        c2 = tuple(int(v) for v in rng.integers(20, 236, size=3))
        return cls(category, c1, c2, PATTERNS[int(rng.integers(len(PATTERNS)))], int(rng.integers(3, 7)))


def category_mask(category: str, h: int = 28, w: int = 24) -> np.ndarray:
    """Canonical silhouette of a category at its reference size."""
    yy, xx = np.mgrid[0:h, 0:w]
    if category == "mug":
        body = (xx >= 2) & (xx < w - 8) & (yy >= 4) & (yy < h - 2)
        cy, cx = h / 2, w - 8
        ring = ((yy - cy) ** 2 / 49 + (xx - cx) ** 2 / 36)
        handle = (ring <= 1.0) & (ring >= 0.35) & (xx >= w - 8)
        return body | handle
    if category == "bottle":
        mid = w / 2
        body = (np.abs(xx - mid) < 6) & (yy >= 10) & (yy < h)
        shoulder = (np.abs(xx - mid) < 6 - (10 - yy) * 0.6) & (yy >= 5) & (yy < 10)
        neck = (np.abs(xx - mid) < 2.5) & (yy < 6)
        return body | shoulder | neck
    # generic blob for categories the toy world does not model
    return ((yy - h / 2) ** 2 / (h / 2.2) ** 2 + (xx - w / 2) ** 2 / (w / 2.2) ** 2) <= 1.0


def paint(app: Appearance, mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    p = app.period
    if app.pattern == "hstripes":
        sel = (yy // p) % 2 == 0
    elif app.pattern == "vstripes":
        sel = (xx // p) % 2 == 0
    elif app.pattern == "checker":
        sel = ((yy // p) + (xx // p)) % 2 == 0
    else:
        sel = ((yy % (2 * p) - p) ** 2 + (xx % (2 * p) - p) ** 2) < (p * 0.8) ** 2
    out = np.where(sel[..., None], np.array(app.primary), np.array(app.secondary))
    return (out * mask[..., None]).astype(np.uint8)


def render_sprite(app: Appearance, scale: float = 1.0, flip: bool = False,
                  angle_deg: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Painted sprite and its mask after scaling, optional mirror and rotation."""
    from PIL import Image

    base_mask = category_mask(app.category)
    base = paint(app, base_mask)
    h, w = base_mask.shape
    scale = scale * SPRITE_SCALE
    nh, nw = max(4, int(round(h * scale))), max(4, int(round(w * scale)))
    rgba = np.dstack([base, base_mask.astype(np.uint8) * 255])
    im = Image.fromarray(rgba, "RGBA").resize((nw, nh), Image.NEAREST)
    if flip:
        im = im.transpose(Image.FLIP_LEFT_RIGHT)
    if angle_deg:
        im = im.rotate(angle_deg, resample=Image.NEAREST, expand=True)
    arr = np.asarray(im)
    return arr[..., :3].copy(), arr[..., 3] > 127


def place(canvas: np.ndarray, sprite: np.ndarray, mask: np.ndarray, top: int, left: int) -> np.ndarray:
    """Paste in place; returns the full-size mask of pasted pixels (clipped to the canvas)."""
    H, W = canvas.shape[:2]
    h, w = mask.shape
    r0, c0 = max(0, top), max(0, left)
    r1, c1 = min(H, top + h), min(W, left + w)
    full = np.zeros((H, W), dtype=bool)
    if r0 >= r1 or c0 >= c1:
        return full
    sm = mask[r0 - top:r1 - top, c0 - left:c1 - left]
    region = canvas[r0:r1, c0:c1]
    region[sm] = sprite[r0 - top:r1 - top, c0 - left:c1 - left][sm]
    full[r0:r1, c0:c1] = sm
    return full


def _random_offset(rng, canvas_hw, sprite_hw):
    H, W = canvas_hw
    h, w = sprite_hw
    return int(rng.integers(0, max(1, H - h + 1))), int(rng.integers(0, max(1, W - w + 1)))


def render_scene(app: Appearance, rng: np.random.Generator, background: np.ndarray, *,
                 pose: bool = False, distractors: int = 0,
                 distractor_category: Optional[str] = None) -> tuple[np.ndarray, np.ndarray]:
    """One photo of ``app`` on ``background``; returns pixels and the target's visible mask."""
    canvas = np.array(background, dtype=np.uint8)
    if pose:
        scale = float(rng.uniform(0.65, 1.25))
        flip = bool(rng.random() < 0.5)
        angle = float(rng.uniform(-25, 25))
    else:
        scale, flip, angle = float(rng.uniform(0.95, 1.05)), False, 0.0
    sprite, smask = render_sprite(app, scale, flip, angle)
    top, left = _random_offset(rng, canvas.shape[:2], smask.shape)
    target = place(canvas, sprite, smask, top, left)
    for _ in range(distractors):
        other = Appearance.random(distractor_category or app.category, rng)
        dsprite, dmask = render_sprite(other, float(rng.uniform(0.7, 1.1)), bool(rng.random() < 0.5))
        for _attempt in range(20):
            dt, dl = _random_offset(rng, canvas.shape[:2], dmask.shape)
            probe = place(np.zeros_like(canvas), dsprite, dmask, dt, dl)
            if not (probe & target).any():
                place(canvas, dsprite, dmask, dt, dl)
                break
    return canvas, target


def background_texture(key: int, k: int, size=(IMAGE_SIZE, IMAGE_SIZE)) -> np.ndarray:
    return procedural_texture(np.random.default_rng([key, k]), size, palette_key=key)


def make_toy_dataset(n_instances: int = 8, n_test: int = 6, seed: int = 0) -> InstanceDataset:
    """The bundled procedural dataset: ``n_instances`` objects split over two categories."""
    rng = np.random.default_rng([seed, 1])
    instances = {}
    for i in range(n_instances):
        category = CATEGORIES[i % len(CATEGORIES)]
        iid = f"{category}_{i:02d}"
        app = Appearance.random(category, rng)
        home_key = int(rng.integers(1 << 30))
        train = []
        for j in range(3):
            px, m = render_scene(app, np.random.default_rng([seed, i, j]), background_texture(home_key, j % 2))
            train.append(ImageRecord(f"{iid}_train{j}", px, iid, "train", "id", m))
        test = []
        for j in range(n_test):
            scene = TEST_SCENES[j % len(TEST_SCENES)]
            srng = np.random.default_rng([seed, i, 100 + j])
            if scene == "id":
                bg = background_texture(home_key, 2 + j)
            else:
                bg = background_texture(int(srng.integers(1 << 30)), j)
            px, m = render_scene(app, srng, bg, pose=scene in ("pose", "both"),
                                 distractors=2 if scene in ("distractors", "both") else 0)
            test.append(ImageRecord(f"{iid}_test{j}", px, iid, "test", scene, m))
        instances[iid] = InstanceEntry(category, tuple(train), tuple(test))
    return InstanceDataset(instances)


def generic_object_image(category: str, rng: np.random.Generator,
                         background: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """A random member of ``category`` on ``background``: the toy "a photo of <category>"."""
    app = Appearance.random(category, rng)
    return render_scene(app, rng, background, pose=True)
