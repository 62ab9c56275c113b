"""Synthetic slides, annotations and collections shared by the tests."""

from __future__ import annotations

import numpy as np
from PIL import Image

from wsiblend.annotations import CLASS_ORDER, AnnotationSet, ArtifactClass, ellipse_polygon, rasterize_soft
from wsiblend.container import PixelSpacing, Region, TileStore
from wsiblend.extraction import ArtifactCollection, ArtifactSpecimen

TISSUE = np.array([214, 150, 190], dtype=np.float64)
ARTIFACT_COLOURS = {
    ArtifactClass.AIR: (235, 225, 230),
    ArtifactClass.DUST: (60, 50, 45),
    ArtifactClass.TISSUE_FOLD: (120, 40, 110),
    ArtifactClass.INK: (30, 90, 60),
    ArtifactClass.MARKER: (20, 40, 160),
    ArtifactClass.FOCUS: (200, 140, 180),
}


def tissue_image(height: int, width: int, seed: int = 0) -> np.ndarray:
    """White glass with one textured pink tissue ellipse covering roughly the middle half."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    inside = ((xx - width / 2) / (width * 0.32)) ** 2 + ((yy - height / 2) / (height * 0.3)) ** 2 <= 1
    img = np.full((height, width, 3), 245.0)
    noise = rng.normal(0, 12, (height, width, 1))
    img[inside] = (TISSUE + noise[inside]).clip(0, 255)
    img += rng.normal(0, 2, img.shape)
    return img.clip(0, 255).round().astype(np.uint8)


def tissue_store(height=1024, width=1024, tile_size=256, spacing=0.5, seed=0, path=None) -> TileStore:
    store = TileStore.create(width, height, tile_size, PixelSpacing.isotropic(spacing), path=path)
    store.write_region(Region(0, 0, width, height), tissue_image(height, width, seed))
    return store


def artifact_specimen(cls: ArtifactClass, radius: float = 20.0, spacing: float = 0.5, seed: int = 0,
                      aspect: float = 0.7) -> ArtifactSpecimen:
    rng = np.random.default_rng(seed)
    w = h = int(2 * radius) + 12
    poly = ellipse_polygon(f"{cls.value}", cls, w / 2, h / 2, radius, radius * aspect)
    mask = rasterize_soft(poly.points, 0, 0, w, h)
    rgb = np.empty((h, w, 3))
    rgb[:] = ARTIFACT_COLOURS[cls]
    rgb += rng.normal(0, 8, (h, w, 3))
    rgb = rgb.clip(0, 255).round().astype(np.uint8)
    return ArtifactSpecimen(cls, rgb, mask, PixelSpacing.isotropic(spacing), f"synthetic:{cls.value}:{seed}", poly)


def synthetic_collection(per_class: int = 2, radius: float = 20.0, spacing: float = 0.5,
                         classes=CLASS_ORDER) -> ArtifactCollection:
    coll = ArtifactCollection()
    for cls in classes:
        for k in range(per_class):
            coll.add(artifact_specimen(cls, radius * (1 + 0.25 * k), spacing, seed=cls.index * 10 + k))
    return coll


def painted_slide(height=768, width=768, spacing=0.5, seed=0):
    """Slide with one painted ellipse per class and matching annotations."""
    img = tissue_image(height, width, seed).astype(np.float64)
    anns = []
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    for cls in CLASS_ORDER:
        cx = 100 + (cls.index % 3) * 250
        cy = 150 + (cls.index // 3) * 400
        rx, ry = 40 + 4 * cls.index, 28
        poly = ellipse_polygon(f"{cls.value}_{cls.index}", cls, cx, cy, rx, ry)
        anns.append(poly)
        inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
        img[inside] = ARTIFACT_COLOURS[cls]
    return img.round().astype(np.uint8), AnnotationSet(tuple(anns))


def save_png(arr: np.ndarray, path, spacing_um: float | None = 0.5):
    dpi = None if spacing_um is None else 25400.0 / spacing_um
    kw = {} if dpi is None else {"dpi": (dpi, dpi)}
    Image.fromarray(arr).save(path, format="PNG", **kw)
    return path


def dense_dirichlet(dst, src, omega):
    """Oracle: assemble the 5-point system densely, pixel by pixel, and solve directly."""
    idx = {p: i for i, p in enumerate(zip(*np.nonzero(omega)))}
    n = len(idx)
    A = np.zeros((n, n))
    b = np.zeros(n)
    for (r, c), i in idx.items():
        A[i, i] = 4
        b[i] = 4 * float(src[r, c])
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            q = (r + dr, c + dc)
            b[i] -= float(src[q])
            if q in idx:
                A[i, idx[q]] = -1
            else:
                b[i] += float(dst[q])
    x = np.linalg.solve(A, b)
    out = dst.astype(float).copy()
    for (r, c), i in idx.items():
        out[r, c] = x[i]
    return out
