"""Pyramidal tiled slide storage with streaming region access.

A store is a directory holding ``store.json`` (dimensions, tile size, level
list, pixel spacing) and one PNG per written tile under
``tiles/<level>/<tx>_<ty>.png``. Tiles that were never written are implicit
and read back as the store's fill colour, so a 100k x 100k slide costs
nothing until somebody writes into it.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import shutil
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DimensionMismatch,
    InvalidDimensions,
    IoFailure,
    MissingSpacing,
    OutOfBounds,
    UnreadableFile,
)

logger = logging.getLogger(__name__)

METADATA_NAME = "store.json"
FORMAT_TAG = "wsiblend-tilestore"
DEFAULT_TILE_SIZE = 512
WHITE = (255, 255, 255)


@dataclass(frozen=True)
class PixelSpacing:
    """Physical pixel size in micrometres per pixel."""

    x_um_per_px: float
    y_um_per_px: float

    def __post_init__(self):
        for v in (self.x_um_per_px, self.y_um_per_px):
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"pixel spacing must be positive and finite, got {v!r}")

    @classmethod
    def isotropic(cls, um_per_px: float) -> "PixelSpacing":
        return cls(float(um_per_px), float(um_per_px))

    def to_dict(self) -> dict:
        return {"x_um_per_px": float(self.x_um_per_px), "y_um_per_px": float(self.y_um_per_px)}

    @classmethod
    def from_dict(cls, d: dict) -> "PixelSpacing":
        return cls(float(d["x_um_per_px"]), float(d["y_um_per_px"]))


@dataclass(frozen=True)
class Level:
    downsample: int
    width: int
    height: int


@dataclass(frozen=True)
class Region:
    """A rectangle to read or write.

    ``x``/``y`` are level-0 offsets (divided by the level's downsample when
    addressing a coarser level); ``width``/``height`` are in pixels of the
    addressed level.
    """

    x: int
    y: int
    width: int
    height: int
    level: int = 0


def pyramid_levels(width: int, height: int, tile_size: int) -> list[Level]:
    levels = [Level(1, width, height)]
    while max(levels[-1].width, levels[-1].height) > tile_size:
        prev = levels[-1]
        levels.append(
            Level(prev.downsample * 2, -(-prev.width // 2), -(-prev.height // 2))
        )
    return levels


def box_downsample(block: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """2x2 box average with round-half-up; partial blocks at the edge average what exists."""
    h, w = block.shape[:2]
    padded = np.zeros((out_h * 2, out_w * 2, 3), dtype=np.uint32)
    count = np.zeros((out_h * 2, out_w * 2), dtype=np.uint32)
    padded[:h, :w] = block
    count[:h, :w] = 1
    s = padded.reshape(out_h, 2, out_w, 2, 3).sum(axis=(1, 3))
    n = count.reshape(out_h, 2, out_w, 2).sum(axis=(1, 3))[..., None]
    return ((2 * s + n) // (2 * n)).astype(np.uint8)


class _MemoryTiles:
    def __init__(self):
        self._tiles: dict[tuple[int, int, int], np.ndarray] = {}

    def get(self, key):
        t = self._tiles.get(key)
        return None if t is None else t.copy()

    def put(self, key, arr):
        self._tiles[key] = arr.copy()

    def keys(self):
        return sorted(self._tiles)


class _DirectoryTiles:
    def __init__(self, root: Path, compress_level: int):
        self.root = root
        self.compress_level = compress_level

    def path(self, key) -> Path:
        level, tx, ty = key
        return self.root / "tiles" / str(level) / f"{tx}_{ty}.png"

    def get(self, key):
        p = self.path(key)
        if not p.exists():
            return None
        with Image.open(p) as im:
            return np.asarray(im.convert("RGB")).copy()

    def put(self, key, arr):
        p = self.path(key)
        p.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        Image.fromarray(arr, "RGB").save(buf, format="PNG", compress_level=self.compress_level)
        tmp = p.with_suffix(".png.tmp")
        try:
            tmp.write_bytes(buf.getvalue())
            os.replace(tmp, p)  # per-tile atomic replace
        except OSError as e:
            raise IoFailure(f"cannot write tile {p}: {e}") from e

    def keys(self):
        out = []
        base = self.root / "tiles"
        if not base.exists():
            return out
        for level_dir in base.iterdir():
            for f in level_dir.glob("*.png"):
                tx, ty = f.stem.split("_")
                out.append((int(level_dir.name), int(tx), int(ty)))
        return sorted(out)


class TileStore:
    """Pyramidal RGB slide addressed by (level, tile_x, tile_y).

    Use :meth:`create` / :meth:`open`; pass ``path=None`` to ``create`` for a
    purely in-memory store (handy for tests and scratch work).
    """

    def __init__(self, width, height, tile_size, spacing, levels, fill, backend, path=None, threads=1):
        self.width = width
        self.height = height
        self.tile_size = tile_size
        self.spacing = spacing
        self.levels: list[Level] = levels
        self.fill = tuple(int(c) for c in fill)
        self.path: Optional[Path] = path
        self.threads = max(1, int(threads))
        self._backend = backend
        self._write_lock = threading.Lock()

    # construction ---------------------------------------------------------

    @classmethod
    def create(
        cls,
        width: int,
        height: int,
        tile_size: int = DEFAULT_TILE_SIZE,
        spacing: PixelSpacing = PixelSpacing(0.25, 0.25),
        fill: Sequence[int] = WHITE,
        path: Optional[os.PathLike | str] = None,
        compress_level: int = 6,
        threads: int = 1,
    ) -> "TileStore":
        if width < 1 or height < 1:
            raise InvalidDimensions(f"slide dimensions must be >= 1, got {width}x{height}")
        if tile_size < 64:
            raise InvalidDimensions(f"tile_size must be >= 64, got {tile_size}")
        if len(fill) != 3 or any(not 0 <= int(c) <= 255 for c in fill):
            raise InvalidDimensions(f"fill must be an RGB triple in [0, 255], got {fill!r}")
        levels = pyramid_levels(int(width), int(height), int(tile_size))
        if path is None:
            backend = _MemoryTiles()
        else:
            path = Path(path)
            path.mkdir(parents=True, exist_ok=True)
            backend = _DirectoryTiles(path, compress_level)
        store = cls(int(width), int(height), int(tile_size), spacing, levels, fill, backend, path, threads)
        if path is not None:
            store._save_metadata()
        return store

    @classmethod
    def open(cls, path: os.PathLike | str, compress_level: int = 6, threads: int = 1) -> "TileStore":
        path = Path(path)
        meta_path = path / METADATA_NAME
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise UnreadableFile(f"cannot read tile store metadata {meta_path}: {e}") from e
        if meta.get("format") != FORMAT_TAG:
            raise UnreadableFile(f"{meta_path} is not a {FORMAT_TAG} descriptor")
        levels = [Level(int(l["downsample"]), int(l["width"]), int(l["height"])) for l in meta["levels"]]
        return cls(
            int(meta["width"]),
            int(meta["height"]),
            int(meta["tile_size"]),
            PixelSpacing.from_dict(meta["spacing"]),
            levels,
            meta.get("fill", WHITE),
            _DirectoryTiles(path, compress_level),
            path,
            threads,
        )

    def metadata(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "version": 1,
            "width": self.width,
            "height": self.height,
            "tile_size": self.tile_size,
            # repr-precision floats: far beyond the required 6 significant digits
            "spacing": self.spacing.to_dict(),
            "fill": list(self.fill),
            "levels": [
                {"downsample": l.downsample, "width": l.width, "height": l.height}
                for l in self.levels
            ],
        }

    def _save_metadata(self):
        text = json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n"
        try:
            (self.path / METADATA_NAME).write_text(text, encoding="utf-8")
        except OSError as e:
            raise IoFailure(f"cannot write {self.path / METADATA_NAME}: {e}") from e

    def copy_to(self, path: os.PathLike | str, compress_level: int = 6) -> "TileStore":
        """Copy every written tile into a new directory store at ``path``."""
        path = Path(path)
        if self.path is not None and isinstance(self._backend, _DirectoryTiles):
            if path.exists():
                shutil.rmtree(path)
            shutil.copytree(self.path, path)
            return TileStore.open(path, compress_level=compress_level, threads=self.threads)
        dst = TileStore.create(
            self.width, self.height, self.tile_size, self.spacing, self.fill, path,
            compress_level=compress_level, threads=self.threads,
        )
        for key in self._backend.keys():
            dst._backend.put(key, self._backend.get(key))
        return dst

    def copy_in_memory(self) -> "TileStore":
        dst = TileStore.create(self.width, self.height, self.tile_size, self.spacing, self.fill, None,
                               threads=self.threads)
        for key in self._backend.keys():
            dst._backend.put(key, self._backend.get(key))
        return dst

    # tiles ----------------------------------------------------------------

    def tile_grid(self, level: int = 0) -> tuple[int, int]:
        lv = self.levels[level]
        return -(-lv.width // self.tile_size), -(-lv.height // self.tile_size)

    def tile_shape(self, level: int, tx: int, ty: int) -> tuple[int, int]:
        lv = self.levels[level]
        w = min(self.tile_size, lv.width - tx * self.tile_size)
        h = min(self.tile_size, lv.height - ty * self.tile_size)
        return h, w

    def read_tile(self, level: int, tx: int, ty: int) -> np.ndarray:
        nx, ny = self.tile_grid(level)
        if not (0 <= tx < nx and 0 <= ty < ny):
            raise OutOfBounds(f"tile ({level}, {tx}, {ty}) outside a {nx}x{ny} grid")
        arr = self._backend.get((level, tx, ty))
        if arr is None:
            h, w = self.tile_shape(level, tx, ty)
            arr = np.empty((h, w, 3), dtype=np.uint8)
            arr[...] = self.fill
        return arr

    def written_tiles(self) -> list[tuple[int, int, int]]:
        return self._backend.keys()

    # region access ----------------------------------------------------------

    def _check(self, level: int, lx: int, ly: int, w: int, h: int):
        if not 0 <= level < len(self.levels):
            raise OutOfBounds(f"level {level} does not exist (store has {len(self.levels)})")
        lv = self.levels[level]
        if w < 1 or h < 1 or lx < 0 or ly < 0 or lx + w > lv.width or ly + h > lv.height:
            raise OutOfBounds(
                f"region ({lx}, {ly}, {w}x{h}) exceeds level {level} bounds {lv.width}x{lv.height}"
            )

    def _tiles_overlapping(self, lx, ly, w, h) -> Iterable[tuple[int, int]]:
        ts = self.tile_size
        for ty in range(ly // ts, (ly + h - 1) // ts + 1):
            for tx in range(lx // ts, (lx + w - 1) // ts + 1):
                yield tx, ty

    def _read_level(self, level: int, lx: int, ly: int, w: int, h: int) -> np.ndarray:
        ts = self.tile_size
        out = np.empty((h, w, 3), dtype=np.uint8)
        for tx, ty in self._tiles_overlapping(lx, ly, w, h):
            tile = self.read_tile(level, tx, ty)
            x0, y0 = tx * ts, ty * ts
            sx0, sy0 = max(lx, x0), max(ly, y0)
            sx1, sy1 = min(lx + w, x0 + tile.shape[1]), min(ly + h, y0 + tile.shape[0])
            out[sy0 - ly:sy1 - ly, sx0 - lx:sx1 - lx] = tile[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0]
        return out

    def _write_level(self, level: int, lx: int, ly: int, pixels: np.ndarray):
        ts = self.tile_size
        h, w = pixels.shape[:2]
        jobs = []
        for tx, ty in self._tiles_overlapping(lx, ly, w, h):
            x0, y0 = tx * ts, ty * ts
            th, tw = self.tile_shape(level, tx, ty)
            sx0, sy0 = max(lx, x0), max(ly, y0)
            sx1, sy1 = min(lx + w, x0 + tw), min(ly + h, y0 + th)
            if (sx0, sy0, sx1, sy1) == (x0, y0, x0 + tw, y0 + th):
                tile = np.ascontiguousarray(pixels[sy0 - ly:sy1 - ly, sx0 - lx:sx1 - lx])
            else:
                tile = self.read_tile(level, tx, ty)
                tile[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = pixels[sy0 - ly:sy1 - ly, sx0 - lx:sx1 - lx]
            jobs.append(((level, tx, ty), tile))
        if self.threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(self.threads) as ex:
                list(ex.map(lambda kv: self._backend.put(*kv), jobs))
        else:
            for key, tile in jobs:
                self._backend.put(key, tile)

    def read_region(self, region: Region) -> np.ndarray:
        """Assemble ``region`` from the tiles it overlaps; never touches other tiles."""
        ds = self.levels[region.level].downsample if 0 <= region.level < len(self.levels) else 1
        lx, ly = region.x // ds, region.y // ds
        self._check(region.level, lx, ly, region.width, region.height)
        return self._read_level(region.level, lx, ly, region.width, region.height)

    def write_region(self, region: Region, pixels: np.ndarray) -> None:
        """Write level-0 pixels and re-derive the affected part of every coarser level."""
        if region.level != 0:
            raise OutOfBounds("writes are only allowed at level 0")
        self._check(0, region.x, region.y, region.width, region.height)
        pixels = np.asarray(pixels)
        if pixels.shape != (region.height, region.width, 3):
            raise DimensionMismatch(
                f"pixels of shape {pixels.shape} do not match region {region.width}x{region.height}x3"
            )
        pixels = pixels.astype(np.uint8, copy=False)
        with self._write_lock:
            self._write_level(0, region.x, region.y, pixels)
            x0, y0 = region.x, region.y
            x1, y1 = region.x + region.width, region.y + region.height
            for k in range(1, len(self.levels)):
                prev, lv = self.levels[k - 1], self.levels[k]
                x0, y0 = x0 // 2, y0 // 2
                x1, y1 = min(-(-x1 // 2), lv.width), min(-(-y1 // 2), lv.height)
                px1, py1 = min(2 * x1, prev.width), min(2 * y1, prev.height)
                block = self._read_level(k - 1, 2 * x0, 2 * y0, px1 - 2 * x0, py1 - 2 * y0)
                self._write_level(k, x0, y0, box_downsample(block, y1 - y0, x1 - x0))

    def read_level(self, level: int) -> np.ndarray:
        lv = self.levels[level]
        return self._read_level(level, 0, 0, lv.width, lv.height)

    def __repr__(self):
        where = str(self.path) if self.path else "memory"
        return (
            f"TileStore({self.width}x{self.height}, tile={self.tile_size}, "
            f"levels={len(self.levels)}, spacing={self.spacing.x_um_per_px:g}um/px, {where})"
        )


def create_store(width, height, tile_size=DEFAULT_TILE_SIZE, spacing=PixelSpacing(0.25, 0.25),
                 fill=WHITE, path=None, **kwargs) -> TileStore:
    return TileStore.create(width, height, tile_size, spacing, fill, path, **kwargs)


def read_region(store: TileStore, region: Region) -> np.ndarray:
    return store.read_region(region)


def write_region(store: TileStore, region: Region, pixels: np.ndarray) -> None:
    store.write_region(region, pixels)


def _spacing_from_image(im: Image.Image) -> Optional[PixelSpacing]:
    dpi = im.info.get("dpi")
    if dpi and all(float(d) > 0 for d in dpi):
        return PixelSpacing(25400.0 / float(dpi[0]), 25400.0 / float(dpi[1]))
    return None


def import_flat_image(
    path: os.PathLike | str,
    tile_size: int = DEFAULT_TILE_SIZE,
    spacing: Optional[PixelSpacing] = None,
    dest: Optional[os.PathLike | str] = None,
    threads: int = 1,
) -> TileStore:
    """Load a lossless RGB image file into a new tile store.

    Spacing is taken from ``spacing`` if given, else from the file's resolution
    metadata (PNG pHYs / TIFF resolution tags).
    """
    try:
        with Image.open(path) as im:
            im.load()
            file_spacing = _spacing_from_image(im)
            pixels = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as e:
        raise UnreadableFile(f"cannot read image {path}: {e}") from e
    spacing = spacing or file_spacing
    if spacing is None:
        raise MissingSpacing(f"{path} carries no resolution metadata; pass a pixel spacing explicitly")
    h, w = pixels.shape[:2]
    store = TileStore.create(w, h, tile_size, spacing, path=dest, threads=threads)
    store.write_region(Region(0, 0, w, h), pixels)
    return store


def export_flat_image(store: TileStore, level: int, path: os.PathLike | str) -> Path:
    """Write one pyramid level as a single PNG carrying the level's pixel spacing."""
    path = Path(path)
    ds = store.levels[level].downsample
    dpi = (25400.0 / (store.spacing.x_um_per_px * ds), 25400.0 / (store.spacing.y_um_per_px * ds))
    try:
        Image.fromarray(store.read_level(level), "RGB").save(path, format="PNG", dpi=dpi)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    return path
