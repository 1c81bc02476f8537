"""Sliding-window tile grids and Gaussian-weighted reassembly of externally
transformed tiles (e.g. the output of an image-to-image translation model).

Tile files are named ``tile_{row}_{col}.png`` (zero-based) and live next to
a ``grid.json`` manifest holding ``tile_size``, ``overlap``, ``width`` and
``height``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .core import load_image, save_image
from .errors import CoverageGap, DimensionMismatch, MissingTile
from .preprocess import gaussian_kernel

__all__ = ["TileGrid", "blend_tiles", "bilateral_filter", "apply_external_tiles",
           "write_tiles", "tile_weight"]


def _starts(length, size, step):
    if length <= size:
        return [0]
    n = math.ceil((length - size) / step) + 1
    return sorted({min(i * step, length - size) for i in range(n)})


@dataclass(frozen=True)
class TileGrid:
    """Overlapping square tiles; the last row/column is clamped to the image."""

    width: int
    height: int
    tile_size: int = 512
    overlap: int = 256

    def __post_init__(self):
        if not 0 <= self.overlap < self.tile_size:
            raise ValueError("need 0 <= overlap < tile_size")
        if self.width < 1 or self.height < 1:
            raise ValueError("grid needs a non-empty image")

    @property
    def step(self):
        return self.tile_size - self.overlap

    @property
    def rows(self):
        return _starts(self.height, self.tile_size, self.step)

    @property
    def cols(self):
        return _starts(self.width, self.tile_size, self.step)

    def tiles(self):
        """Yield ``(row, col, y0, x0, h, w)`` for every tile."""
        th = min(self.tile_size, self.height)
        tw = min(self.tile_size, self.width)
        for r, y0 in enumerate(self.rows):
            for c, x0 in enumerate(self.cols):
                yield r, c, y0, x0, th, tw

    def to_json(self):
        return {"tile_size": self.tile_size, "overlap": self.overlap,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, d):
        return cls(int(d["width"]), int(d["height"]), int(d["tile_size"]), int(d["overlap"]))


def tile_weight(h, w, sigma):
    """2-D Gaussian centred on an ``h x w`` tile."""
    y = np.arange(h) - (h - 1) / 2.0
    x = np.arange(w) - (w - 1) / 2.0
    return np.exp(-0.5 * (y[:, None] ** 2 + x[None, :] ** 2) / sigma ** 2)


def blend_tiles(tiles, grid):
    """Weighted average of overlapping tiles.

    Parameters
    ----------
    tiles : iterable of ``(tile, (y0, x0))``
    grid : TileGrid
        Supplies the output size and ``sigma = tile_size / 4``.

    The average is accumulated as an offset from the last tile covering each
    pixel, so pixels where all covering tiles agree (in particular pixels
    covered once) reproduce the tile value bit-for-bit.
    """
    sigma = grid.tile_size / 4.0
    tiles = [(np.asarray(t, dtype=np.float64), (int(y0), int(x0))) for t, (y0, x0) in tiles]
    if not tiles:
        raise CoverageGap(f"{grid.width * grid.height} pixels not covered by any tile")
    shape = (grid.height, grid.width) + tiles[0][0].shape[2:]
    ref = np.zeros(shape)
    count = np.zeros((grid.height, grid.width), dtype=np.intp)
    for tile, (y0, x0) in tiles:
        h, w = tile.shape[:2]
        if y0 < 0 or x0 < 0 or y0 + h > grid.height or x0 + w > grid.width:
            raise DimensionMismatch(f"tile at ({y0}, {x0}) of size {h}x{w} leaves the image")
        if tile.shape[2:] != shape[2:]:
            raise DimensionMismatch("tiles differ in channel count")
        ref[y0:y0 + h, x0:x0 + w] = tile
        count[y0:y0 + h, x0:x0 + w] += 1
    if (count == 0).any():
        raise CoverageGap(f"{int((count == 0).sum())} pixels not covered by any tile")
    acc = np.zeros(shape)
    wsum = np.zeros((grid.height, grid.width))
    for tile, (y0, x0) in tiles:
        h, w = tile.shape[:2]
        wt = tile_weight(h, w, sigma)
        sl = (slice(y0, y0 + h), slice(x0, x0 + w))
        acc[sl] += (tile - ref[sl]) * (wt[..., None] if tile.ndim == 3 else wt)
        wsum[sl] += wt
    return ref + acc / (wsum[..., None] if acc.ndim == 3 else wsum)


def bilateral_filter(img, sigma_spatial=2.0, sigma_range=0.1):
    """Edge-preserving smoothing with a joint (colour-distance) range kernel."""
    img = np.asarray(img, dtype=np.float64)
    r = max(1, math.ceil(3 * sigma_spatial))
    pad = ((r, r), (r, r)) + ((0, 0),) * (img.ndim - 2)
    p = np.pad(img, pad, mode="reflect")
    h, w = img.shape[:2]
    num = np.zeros_like(img)
    den = np.zeros((h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ws = math.exp(-0.5 * (dx * dx + dy * dy) / sigma_spatial ** 2)
            if ws < 1e-4:
                continue
            nb = p[r + dy:r + dy + h, r + dx:r + dx + w]
            d2 = (nb - img) ** 2
            if img.ndim == 3:
                d2 = d2.sum(axis=2)
            wt = ws * np.exp(-0.5 * d2 / sigma_range ** 2)
            num += nb * (wt[..., None] if img.ndim == 3 else wt)
            den += wt
    return num / (den[..., None] if img.ndim == 3 else den)


def _gaussian_blur(img, sigma):
    k = gaussian_kernel(sigma)
    out = correlate1d(img, k, axis=0, mode="reflect")
    return correlate1d(out, k, axis=1, mode="reflect")


def apply_external_tiles(img, grid, tile_dir, postfilter=True):
    """Reassemble transformed tiles from ``tile_dir`` into a full image.

    ``img`` fixes the expected output geometry.  After blending, a bilateral
    filter (spatial 2 px, range 0.1) and a Gaussian blur (sigma 0.5) suppress
    seams unless ``postfilter`` is False.
    """
    img = np.asarray(img)
    if (grid.height, grid.width) != img.shape[:2]:
        raise DimensionMismatch(f"grid {grid.height}x{grid.width} vs image {img.shape[:2]}")
    tile_dir = Path(tile_dir)
    tiles = []
    for r, c, y0, x0, th, tw in grid.tiles():
        name = f"tile_{r}_{c}"
        path = tile_dir / f"{name}.png"
        if not path.exists():
            raise MissingTile(name)
        t = load_image(path)
        if t.shape[:2] != (th, tw):
            raise DimensionMismatch(f"{name}: expected {th}x{tw}, got {t.shape[0]}x{t.shape[1]}")
        if t.ndim != img.ndim:
            raise DimensionMismatch(f"{name}: channel count differs from the image")
        tiles.append((t, (y0, x0)))
    out = blend_tiles(tiles, grid)
    if postfilter:
        out = _gaussian_blur(bilateral_filter(out, 2.0, 0.1), 0.5)
    return np.clip(out, 0.0, 1.0)


def write_tiles(img, grid, tile_dir, transform=None):
    """Slice ``img`` along ``grid`` into ``tile_dir`` (plus ``grid.json``).

    ``transform`` optionally maps each tile before it is written; used to
    produce test fixtures and to wrap in-process tile models.
    """
    tile_dir = Path(tile_dir)
    tile_dir.mkdir(parents=True, exist_ok=True)
    for r, c, y0, x0, th, tw in grid.tiles():
        t = img[y0:y0 + th, x0:x0 + tw]
        if transform is not None:
            t = transform(t)
        save_image(tile_dir / f"tile_{r}_{c}.png", t)
    (tile_dir / "grid.json").write_text(json.dumps(grid.to_json(), indent=2) + "\n")


def load_grid(tile_dir):
    return TileGrid.from_json(json.loads((Path(tile_dir) / "grid.json").read_text()))
