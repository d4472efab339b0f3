"""Background sources for Cut-and-Paste: procedural textures, image folders,
or an external text-to-image client."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from persrep import errors
from persrep.dataset import IMAGE_SUFFIXES, read_image
from persrep.imageops import resize_rgb

from .captions import CaptionCorpus


@dataclass(frozen=True)
class Background:
    pixels: np.ndarray
    caption: Optional[str]
    seed: int
    source: str


class BackgroundBackend(Protocol):
    def generate(self, captions: list[str], seed: int) -> list[Background]: ...


def _caption_key(caption: str) -> int:
    return int.from_bytes(hashlib.sha256(caption.encode()).digest()[:4], "little")


def procedural_texture(rng: np.random.Generator, size=(64, 64), palette_key: int = 0) -> np.ndarray:
    """Smooth gradient plus a few blurred blobs and stripes; deterministic in ``rng``."""
    h, w = size
    pal = np.random.default_rng(palette_key)
    base = pal.uniform(40, 215, size=3)
    accent = pal.uniform(0, 255, size=(3, 3))
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * yy + np.sin(angle) * xx
    img = base[None, None, :] + rng.uniform(-50, 50, size=3)[None, None, :] * ramp[..., None]
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, 1, size=2)
        rad = rng.uniform(0.08, 0.35)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad ** 2)))
        col = accent[int(rng.integers(0, 3))] - base
        img = img + blob[..., None] * col[None, None, :] * rng.uniform(0.3, 0.9)
    freq = rng.uniform(4, 14)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(freq * 2 * np.pi * (np.cos(angle + 1.0) * yy + np.sin(angle + 1.0) * xx) + phase)
    img = img + stripes[..., None] * rng.uniform(0, 18)
    img = img + rng.normal(0, 6, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


class ProceduralBackgrounds:
    """Desk-scale stand-in for text-to-image backgrounds.

    The caption picks the palette, the per-index seed picks the layout.
    """

    source = "procedural"

    def __init__(self, size=(64, 64)):
        self.size = tuple(size)

    def generate(self, captions: list[str], seed: int) -> list[Background]:
        out = []
        for k, cap in enumerate(captions):
            rng = np.random.default_rng([seed, k])
            px = procedural_texture(rng, self.size, _caption_key(cap))
            out.append(Background(px, cap, k, self.source))
        return out


class DirectoryBackgrounds:
    """Real backgrounds sampled without replacement from an image folder."""

    source = "directory"

    def __init__(self, folder, size=(64, 64)):
        self.folder = Path(folder)
        self.size = tuple(size)

    def files(self) -> list[Path]:
        if not self.folder.is_dir():
            raise errors.BackendUnavailable(f"background folder {self.folder} does not exist")
        return sorted(p for p in self.folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

    def generate(self, captions: list[str], seed: int) -> list[Background]:
        files = self.files()
        if len(files) < len(captions):
            raise errors.InsufficientSourceImages(
                f"{len(files)} images in {self.folder}, {len(captions)} requested")
        idx = np.random.default_rng(seed).choice(len(files), size=len(captions), replace=False)
        return [Background(resize_rgb(read_image(files[i]), self.size), None, int(i), self.source)
                for i in idx]


class ExternalBackgrounds:
    """Backgrounds rendered by an external text-to-image service."""

    source = "external"

    def __init__(self, client, size=(64, 64), cfg_scale: float = 5.0):
        self.client = client
        self.size = tuple(size)
        self.cfg_scale = cfg_scale

    def generate(self, captions: list[str], seed: int) -> list[Background]:
        if self.client is None:
            raise errors.BackendUnavailable("no external text-to-image client configured")
        out = []
        for k, cap in enumerate(captions):
            imgs = self.client.generate(instance_id="background", caption=cap,
                                        cfg_scale=self.cfg_scale, seed=seed + k, n=1)
            out.append(Background(resize_rgb(imgs[0], self.size), cap, seed + k, self.source))
        return out


def generate_backgrounds(corpus: CaptionCorpus, n: int, backend: BackgroundBackend,
                         seed: int = 0) -> list[Background]:
    """``n`` backgrounds whose captions cycle through the corpus's background captions."""
    captions = corpus.backgrounds()
    picked = [captions[k % len(captions)] for k in range(n)]
    return backend.generate(picked, seed)
