"""Balanced 224x224 patch datasets cut from (augmented) slides.

Manifest columns (comma-separated, header row first):

    slide_id, x, y, size, sample_class, labels, coverages, file

``labels`` is a ``;``-joined list of class names (empty for background),
``coverages`` a ``;``-joined list of ``class:fraction`` pairs (fractions with
six decimals), ``sample_class`` the stratum the patch was drawn for
(a class name or ``background``).
"""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .annotations import CLASS_ORDER, AnnotationSet, ArtifactClass, rasterize_points
from .container import Region, TileStore

logger = logging.getLogger(__name__)

PATCH_SIZE = 224
COVERAGE_THRESHOLD = 0.05
BACKGROUND = "background"
MANIFEST_COLUMNS = ["slide_id", "x", "y", "size", "sample_class", "labels", "coverages", "file"]


@dataclass(frozen=True)
class PatchRecord:
    slide_id: str
    x: int
    y: int
    sample_class: str
    coverages: tuple[tuple[ArtifactClass, float], ...]
    size: int = PATCH_SIZE
    file: str = ""
    threshold: float = COVERAGE_THRESHOLD

    @property
    def labels(self) -> tuple[ArtifactClass, ...]:
        return tuple(c for c, f in self.coverages if f >= self.threshold)

    def row(self) -> list[str]:
        return [
            self.slide_id,
            str(self.x),
            str(self.y),
            str(self.size),
            self.sample_class,
            ";".join(c.value for c in self.labels),
            ";".join(f"{c.value}:{f:.6f}" for c, f in self.coverages),
            self.file,
        ]


@dataclass
class PatchManifest:
    records: list[PatchRecord] = field(default_factory=list)
    params: dict = field(default_factory=dict)
    shortfalls: dict[str, int] = field(default_factory=dict)

    def histogram(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.sample_class] = out.get(r.sample_class, 0) + 1
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue()


def read_manifest(path: os.PathLike | str, threshold: float = COVERAGE_THRESHOLD) -> list[PatchRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            covs = []
            for item in filter(None, row["coverages"].split(";")):
                name, frac = item.rsplit(":", 1)
                covs.append((ArtifactClass.parse(name), float(frac)))
            out.append(PatchRecord(row["slide_id"], int(row["x"]), int(row["y"]), row["sample_class"],
                                   tuple(covs), int(row["size"]), row["file"], threshold))
    return out


def patch_coverages(anns: AnnotationSet, x: int, y: int, size: int = PATCH_SIZE) -> dict[ArtifactClass, float]:
    """Fraction of the patch covered by each class (union of that class's polygons)."""
    per_class: dict[ArtifactClass, np.ndarray] = {}
    for a in anns:
        bx0, by0, bx1, by1 = a.bbox()
        if bx1 <= x or by1 <= y or bx0 >= x + size or by0 >= y + size:
            continue
        m = rasterize_points(a.points, x, y, size, size)
        if a.cls in per_class:
            per_class[a.cls] |= m
        else:
            per_class[a.cls] = m
    out = {}
    for cls in CLASS_ORDER:
        if cls in per_class:
            frac = float(per_class[cls].sum()) / (size * size)
            if frac > 0:
                out[cls] = frac
    return out


def label_patch(anns: AnnotationSet, x: int, y: int, size: int = PATCH_SIZE,
                threshold: float = COVERAGE_THRESHOLD) -> dict[ArtifactClass, float]:
    """Classes whose coverage reaches ``threshold``; an empty dict means background."""
    return {c: f for c, f in patch_coverages(anns, x, y, size).items() if f >= threshold}


def cut_patches(
    store: TileStore,
    anns: AnnotationSet,
    per_class_target: int,
    background_count: int,
    seed: int = 0,
    out_dir: Optional[os.PathLike | str] = None,
    slide_id: str = "slide",
    size: int = PATCH_SIZE,
    threshold: float = COVERAGE_THRESHOLD,
    max_tries_factor: int = 50,
    threads: int = 1,
) -> PatchManifest:
    """Sample a class-balanced patch set.

    Artifact candidates are drawn round-robin over the class's annotations
    with the patch centre uniform inside the annotation bbox; background
    candidates are uniform over the slide and must not touch any polygon.
    """
    if per_class_target < 0 or background_count < 0:
        raise ValueError("targets must be >= 0")
    rng = np.random.default_rng(int(seed))
    params = {"per_class_target": per_class_target, "background_count": background_count, "seed": int(seed),
              "size": size, "coverage_threshold": threshold, "slide_id": slide_id}
    manifest = PatchManifest(params=params)
    if store.width < size or store.height < size:
        logger.warning("slide %s is smaller than one patch", slide_id)
        for cls in CLASS_ORDER:
            if per_class_target and anns.of_class(cls):
                manifest.shortfalls[cls.value] = per_class_target
        if background_count:
            manifest.shortfalls[BACKGROUND] = background_count
        return manifest

    seen: set[tuple[int, int]] = set()
    max_x, max_y = store.width - size, store.height - size
    half = size // 2

    for cls in CLASS_ORDER:
        polys = anns.of_class(cls)
        if per_class_target == 0 or not polys:
            continue
        got = 0
        tries = 0
        while got < per_class_target and tries < max_tries_factor * per_class_target:
            poly = polys[tries % len(polys)]
            tries += 1
            bx0, by0, bx1, by1 = poly.bbox()
            cx = rng.uniform(bx0, bx1) if bx1 > bx0 else bx0
            cy = rng.uniform(by0, by1) if by1 > by0 else by0
            x = int(np.clip(round(cx) - half, 0, max_x))
            y = int(np.clip(round(cy) - half, 0, max_y))
            if (x, y) in seen:
                continue
            covs = patch_coverages(anns, x, y, size)
            if covs.get(cls, 0.0) < threshold:
                continue
            seen.add((x, y))
            manifest.records.append(PatchRecord(slide_id, x, y, cls.value, tuple(covs.items()), size,
                                                threshold=threshold))
            got += 1
        if got < per_class_target:
            manifest.shortfalls[cls.value] = per_class_target - got

    got = 0
    tries = 0
    while got < background_count and tries < max_tries_factor * background_count:
        tries += 1
        x = int(rng.integers(0, max_x + 1))
        y = int(rng.integers(0, max_y + 1))
        if (x, y) in seen or patch_coverages(anns, x, y, size):
            continue
        seen.add((x, y))
        manifest.records.append(PatchRecord(slide_id, x, y, BACKGROUND, (), size, threshold=threshold))
        got += 1
    if got < background_count:
        manifest.shortfalls[BACKGROUND] = background_count - got
    for name, short in manifest.shortfalls.items():
        logger.warning("patch shortfall for %s: %d", name, short)

    if out_dir is not None:
        _write_patches(store, manifest, Path(out_dir), threads)
    return manifest


def _write_patches(store: TileStore, manifest: PatchManifest, out_dir: Path, threads: int) -> None:
    pdir = out_dir / "patches"
    pdir.mkdir(parents=True, exist_ok=True)
    named = []
    for r in manifest.records:
        fname = f"patches/{r.slide_id}_{r.x}_{r.y}.png"
        named.append(PatchRecord(r.slide_id, r.x, r.y, r.sample_class, r.coverages, r.size, fname, r.threshold))
    manifest.records = named

    def save(r: PatchRecord):
        pixels = store.read_region(Region(r.x, r.y, r.size, r.size))
        Image.fromarray(pixels, "RGB").save(out_dir / r.file, format="PNG")

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(save, named))
    else:
        for r in named:
            save(r)
    (out_dir / "manifest.csv").write_text(manifest.to_csv(), encoding="utf-8")
