"""Cutting annotated artifacts out of donor slides into a reusable collection.

On disk a collection is one directory per artifact class, each holding one
sub-directory per specimen::

    <root>/collection.json
    <root>/<class>/<id>/rgb.png     lossless RGB crop
    <root>/<class>/<id>/mask.npy    soft mask, float64, same height/width
    <root>/<class>/<id>/meta.json   class, spacing, source_id, local polygon
"""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .annotations import (
    CLASS_ORDER,
    ArtifactClass,
    PolygonAnnotation,
    mask_iou,
    rasterize_points,
    rasterize_soft,
)
from .container import PixelSpacing, Region, TileStore
from .errors import CorruptEntry, EmptyClass, IoFailure, OutOfBounds

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 8
MIN_SELF_IOU = 0.99


def polygon_mask(points: np.ndarray, width: int, height: int) -> np.ndarray:
    """Soft specimen mask: 2x supersampled coverage, topped up with the hard
    fill for slivers too thin to reach 0.5 anywhere."""
    mask = rasterize_soft(points, 0, 0, width, height)
    if not (mask > 0.5).any():
        mask = np.maximum(mask, rasterize_points(points, 0, 0, width, height).astype(np.float64))
    return mask


@dataclass(eq=False)
class ArtifactSpecimen:
    cls: ArtifactClass
    rgb: np.ndarray
    mask: np.ndarray
    spacing: PixelSpacing
    source_id: str
    polygon: PolygonAnnotation  # bbox-local coordinates

    def __post_init__(self):
        if self.rgb.shape[:2] != self.mask.shape:
            raise CorruptEntry(
                f"specimen {self.source_id!r}: rgb {self.rgb.shape[:2]} and mask {self.mask.shape} differ"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def self_iou(self) -> float:
        h, w = self.mask.shape
        return mask_iou(polygon_mask(self.polygon.points, w, h) >= 0.5, self.mask >= 0.5)

    def same_as(self, other: "ArtifactSpecimen", tol: float = 1e-6) -> bool:
        return (
            self.cls is other.cls
            and self.source_id == other.source_id
            and np.array_equal(self.rgb, other.rgb)
            and np.array_equal(self.mask, other.mask)
            and self.spacing == other.spacing
            and self.polygon.almost_equal(other.polygon, tol)
        )


@dataclass
class ArtifactCollection:
    specimens: dict[ArtifactClass, list[ArtifactSpecimen]] = field(
        default_factory=lambda: {c: [] for c in CLASS_ORDER}
    )
    load_warnings: list[str] = field(default_factory=list)

    def add(self, s: ArtifactSpecimen) -> None:
        self.specimens.setdefault(s.cls, []).append(s)

    def of_class(self, cls: ArtifactClass) -> list[ArtifactSpecimen]:
        return self.specimens.get(cls, [])

    def count(self, cls: ArtifactClass) -> int:
        return len(self.of_class(cls))

    def counts(self) -> dict[str, int]:
        return {c.value: self.count(c) for c in CLASS_ORDER}

    def __len__(self):
        return sum(len(v) for v in self.specimens.values())


def extract_artifact(store: TileStore, ann: PolygonAnnotation, margin_px: int = DEFAULT_MARGIN,
                     source_id: Optional[str] = None) -> ArtifactSpecimen:
    """Read only the polygon's bbox (plus margin) and build a specimen from it."""
    if margin_px < 0:
        raise ValueError("margin_px must be >= 0")
    xmin, ymin, xmax, ymax = ann.bbox()
    x0 = int(math.floor(xmin)) - margin_px
    y0 = int(math.floor(ymin)) - margin_px
    x1 = int(math.ceil(xmax)) + margin_px
    y1 = int(math.ceil(ymax)) + margin_px
    if x0 < 0 or y0 < 0 or x1 > store.width or y1 > store.height or x1 <= x0 or y1 <= y0:
        raise OutOfBounds(
            f"annotation {ann.name!r} bbox+margin ({x0}, {y0})-({x1}, {y1}) exceeds slide "
            f"{store.width}x{store.height}"
        )
    rgb = store.read_region(Region(x0, y0, x1 - x0, y1 - y0))
    local = ann.translated(-x0, -y0)
    mask = polygon_mask(local.points, x1 - x0, y1 - y0)
    return ArtifactSpecimen(ann.cls, rgb, mask, store.spacing, source_id or ann.name, local)


def _specimen_meta(s: ArtifactSpecimen) -> dict:
    return {
        "class": s.cls.value,
        "source_id": s.source_id,
        "spacing": s.spacing.to_dict(),
        "height": int(s.mask.shape[0]),
        "width": int(s.mask.shape[1]),
        "polygon": {"name": s.polygon.name, "vertices": [list(v) for v in s.polygon.vertices]},
    }


def save_collection(collection: ArtifactCollection, path: os.PathLike | str) -> Path:
    """Write the whole collection, replacing whatever was at ``path``."""
    root = Path(path)
    try:
        if root.exists():
            shutil.rmtree(root)
        root.mkdir(parents=True)
        for cls in CLASS_ORDER:
            cdir = root / cls.value
            cdir.mkdir()
            for i, s in enumerate(collection.of_class(cls)):
                sdir = cdir / f"{i:05d}"
                sdir.mkdir()
                Image.fromarray(s.rgb, "RGB").save(sdir / "rgb.png", format="PNG")
                np.save(sdir / "mask.npy", s.mask.astype(np.float64))
                (sdir / "meta.json").write_text(
                    json.dumps(_specimen_meta(s), indent=2, sort_keys=True) + "\n", encoding="utf-8"
                )
        (root / "collection.json").write_text(
            json.dumps({"format": "wsiblend-collection", "version": 1, "counts": collection.counts()},
                       indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    except OSError as e:
        raise IoFailure(f"cannot write collection at {root}: {e}") from e
    return root


def _load_specimen(sdir: Path, cls: ArtifactClass) -> ArtifactSpecimen:
    try:
        meta = json.loads((sdir / "meta.json").read_text(encoding="utf-8"))
        with Image.open(sdir / "rgb.png") as im:
            rgb = np.asarray(im.convert("RGB")).copy()
        mask = np.load(sdir / "mask.npy")
    except (OSError, ValueError) as e:
        raise CorruptEntry(f"{sdir}: unreadable entry ({e})") from e
    if ArtifactClass.parse(meta["class"]) is not cls:
        raise CorruptEntry(f"{sdir}: metadata class {meta['class']!r} does not match directory")
    if mask.ndim != 2 or rgb.shape[:2] != mask.shape or mask.shape != (meta["height"], meta["width"]):
        raise CorruptEntry(
            f"{sdir}: raster {rgb.shape[:2]} / mask {mask.shape} / metadata "
            f"{(meta['height'], meta['width'])} dimensions disagree"
        )
    poly = PolygonAnnotation(meta["polygon"]["name"], cls, meta["polygon"]["vertices"])
    s = ArtifactSpecimen(cls, rgb, mask, PixelSpacing.from_dict(meta["spacing"]), meta["source_id"], poly)
    iou = s.self_iou()
    if iou < MIN_SELF_IOU:
        raise CorruptEntry(f"{sdir}: mask and polygon disagree (IoU {iou:.3f})")
    return s


def load_collection(path: os.PathLike | str) -> ArtifactCollection:
    """Load a collection; corrupt entries are skipped and listed in ``load_warnings``."""
    root = Path(path)
    collection = ArtifactCollection()
    if not root.exists():
        return collection
    for cls in CLASS_ORDER:
        cdir = root / cls.value
        if not cdir.is_dir():
            continue
        for sdir in sorted(p for p in cdir.iterdir() if p.is_dir()):
            try:
                collection.add(_load_specimen(sdir, cls))
            except CorruptEntry as e:
                logger.warning("skipping corrupt collection entry: %s", e)
                collection.load_warnings.append(str(e))
    return collection


def sample_specimen(collection: ArtifactCollection, cls: ArtifactClass, rng: np.random.Generator) -> ArtifactSpecimen:
    pool = collection.of_class(cls)
    if not pool:
        raise EmptyClass(f"collection has no {cls.value} specimens")
    return pool[int(rng.integers(len(pool)))]
