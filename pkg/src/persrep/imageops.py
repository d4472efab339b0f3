"""Small raster helpers shared by generation, encoding and evaluation."""
from __future__ import annotations

import numpy as np
from PIL import Image


def resize_rgb(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an 8-bit RGB grid to ``size = (H, W)``."""
    h, w = size
    if pixels.shape[:2] == (h, w):
        return np.array(pixels, dtype=np.uint8)
    im = Image.fromarray(np.asarray(pixels, dtype=np.uint8), "RGB")
    return np.asarray(im.resize((w, h), Image.BILINEAR), dtype=np.uint8)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize using pixel-centre sampling."""
    return resize_nearest(np.asarray(mask, dtype=bool), size)


def bilinear_sample(grid: np.ndarray, rows, cols) -> np.ndarray:
    """Sample a 2-D float grid at continuous (row, col) pixel coordinates.

    Cell ``(i, j)`` of ``grid`` is taken to sit at coordinate ``(i, j)``;
    coordinates outside the grid are clamped to the border.
    """
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    r = np.clip(np.asarray(rows, dtype=np.float64), 0, h - 1)
    c = np.clip(np.asarray(cols, dtype=np.float64), 0, w - 1)
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    top = grid[r0, c0] * (1 - fc) + grid[r0, c1] * fc
    bot = grid[r1, c0] * (1 - fc) + grid[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def upscale_map(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear upscaling with half-pixel centres (cell centres map to cell centres)."""
    h, w = grid.shape
    H, W = size
    rows = (np.arange(H) + 0.5) * h / H - 0.5
    cols = (np.arange(W) + 0.5) * w / W - 0.5
    return bilinear_sample(grid, rows[:, None], cols[None, :])


def resize_nearest(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of any 2-D grid, keeping its dtype."""
    h, w = size
    grid = np.asarray(grid)
    sh, sw = grid.shape[:2]
    rows = np.minimum(((np.arange(h) + 0.5) * sh / h).astype(int), sh - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * sw / w).astype(int), sw - 1)
    return grid[rows][:, cols]


def crop_box(pixels: np.ndarray, box: tuple[int, int, int, int], pad: float = 0.0) -> np.ndarray:
    """Crop an inclusive box, optionally padded by a fraction of its size per side."""
    r0, c0, r1, c1 = box
    h, w = pixels.shape[:2]
    pr = int(round((r1 - r0 + 1) * pad))
    pc = int(round((c1 - c0 + 1) * pad))
    return pixels[max(0, r0 - pr): min(h, r1 + pr + 1), max(0, c0 - pc): min(w, c1 + pc + 1)]
