"""Tissue masks and insertion-point sampling.

The default segmenter is classical: Otsu on HSV saturation at a coarse
pyramid level, followed by closing/opening and small-object removal. Any
callable ``store -> TissueMask`` can replace it, and a precomputed mask can
be loaded from a binary PNG.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.morphology import binary_closing, binary_opening, disk, remove_small_objects

from .container import TileStore
from .errors import EmptyRegion, ExhaustedAttempts, InvalidDimensions, UnreadableFile

MIN_SATURATION = 0.05  # below this no pixel counts as tissue, whatever Otsu says
FLAT_SATURATION_SPREAD = 1e-3


class PlacementPolicy(str, enum.Enum):
    WHOLE_SLIDE = "whole_slide"
    FOREGROUND = "foreground"
    TISSUE_EDGE = "tissue_edge"
    BACKGROUND = "background"


@dataclass
class TissueMask:
    mask: np.ndarray  # bool, shape of the chosen level
    level: int
    downsample: int

    def to_level0(self, row: int, col: int) -> tuple[int, int]:
        return col * self.downsample, row * self.downsample

    def pixel_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the mask pixel holding level-0 point ``(x, y)``."""
        return int(y // self.downsample), int(x // self.downsample)

    def save(self, path: os.PathLike | str) -> None:
        Image.fromarray(self.mask.astype(np.uint8) * 255, "L").save(path, format="PNG")


Segmenter = Callable[[TileStore], TissueMask]


def segmentation_level(store: TileStore, min_dim: int = 1024) -> int:
    """Coarsest level whose larger side is still >= ``min_dim`` (level 0 if none is)."""
    chosen = 0
    for i, lv in enumerate(store.levels):
        if max(lv.width, lv.height) >= min_dim:
            chosen = i
    return chosen


def saturation(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.float32)
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    return np.where(mx > 0, (mx - mn) / np.maximum(mx, 1e-6), 0.0).astype(np.float32)


def segment_tissue(store: TileStore, level: int | None = None) -> TissueMask:
    if level is None:
        level = segmentation_level(store)
    rgb = store.read_level(level)
    sat = saturation(rgb)
    del rgb
    if float(sat.max() - sat.min()) < FLAT_SATURATION_SPREAD:
        # Otsu is undefined on a flat image; decide the whole slide at once
        mask = np.full(sat.shape, float(sat.mean()) > MIN_SATURATION)
    else:
        t = max(float(threshold_otsu(sat)), MIN_SATURATION)
        mask = sat > t
        fp = disk(2)
        mask = binary_closing(mask, fp)
        mask = binary_opening(mask, fp)
        min_size = int(0.0001 * mask.size)
        if min_size > 1:
            mask = remove_small_objects(mask, min_size=min_size)
    return TissueMask(mask.astype(bool), level, store.levels[level].downsample)


def load_tissue_mask(path: os.PathLike | str, store: TileStore, level: int) -> TissueMask:
    """Read a user-supplied binary mask (nonzero = tissue) for ``level`` of ``store``."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L")) > 0
    except OSError as e:
        raise UnreadableFile(f"cannot read tissue mask {path}: {e}") from e
    if not 0 <= level < len(store.levels):
        raise InvalidDimensions(f"mask level {level} does not exist in the store")
    lv = store.levels[level]
    if arr.shape != (lv.height, lv.width):
        raise InvalidDimensions(
            f"tissue mask {arr.shape[1]}x{arr.shape[0]} does not match level {level} ({lv.width}x{lv.height})"
        )
    return TissueMask(arr, level, lv.downsample)


def policy_region(mask: TissueMask, policy: PlacementPolicy, edge_band_px: int = 16) -> np.ndarray:
    if edge_band_px < 1:
        raise ValueError("edge_band_px must be >= 1")
    m = mask.mask
    if policy is PlacementPolicy.WHOLE_SLIDE:
        return np.ones_like(m, dtype=bool)
    if policy is PlacementPolicy.FOREGROUND:
        return m.copy()
    if policy is PlacementPolicy.BACKGROUND:
        return ~m
    if policy is PlacementPolicy.TISSUE_EDGE:
        if not m.any() or m.all():
            return np.zeros_like(m, dtype=bool)
        # distance transforms give exact disk-shaped morphology; the slide border is not an edge
        dilated = ndimage.distance_transform_edt(~m) <= edge_band_px
        eroded = ndimage.distance_transform_edt(np.pad(m, 1, constant_values=True))[1:-1, 1:-1] > edge_band_px
        return dilated & ~eroded
    raise ValueError(f"unknown placement policy {policy!r}")


def sample_insertion_point(region: np.ndarray, rng: np.random.Generator, max_attempts: int = 1000,
                           downsample: int = 1) -> tuple[int, int]:
    """Rejection-sample a level-0 ``(x, y)`` whose mask pixel is set."""
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    if not region.any():
        raise EmptyRegion("placement region has no pixels")
    h, w = region.shape
    for _ in range(max_attempts):
        row = int(rng.integers(h))
        col = int(rng.integers(w))
        if region[row, col]:
            if downsample > 1:
                return col * downsample + int(rng.integers(downsample)), row * downsample + int(rng.integers(downsample))
            return col, row
    raise ExhaustedAttempts(f"no hit in {max_attempts} attempts (region covers {region.mean():.2%})")
