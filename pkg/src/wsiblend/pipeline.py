"""End-to-end augmentation of a destination slide from an artifact collection."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .annotations import (
    CLASS_ORDER,
    AnnotationSet,
    ArtifactClass,
    PolygonAnnotation,
    ellipse_polygon,
    rasterize_soft,
    transform_polygon,
    write_annotations,
)
from .blending import BlendParams, Strategy, apply_strategy, required_margin
from .container import PixelSpacing, Region, TileStore, export_flat_image
from .errors import (
    ConfigError,
    DegenerateOutput,
    EmptyMask,
    EmptyRegion,
    ExhaustedAttempts,
    IoFailure,
)
from .extraction import ArtifactCollection, ArtifactSpecimen, sample_specimen
from .imgproc import AffineTransform, resize, resized_dims, warp_affine
from .segmentation import (
    PlacementPolicy,
    TissueMask,
    policy_region,
    sample_insertion_point,
    segment_tissue,
)

logger = logging.getLogger(__name__)

MIN_SPECIMEN_PX = 4


@dataclass
class ClassPlan:
    max_insertions: int
    policy: PlacementPolicy
    strategy: Strategy
    blend: BlendParams = field(default_factory=BlendParams)

    def to_dict(self) -> dict:
        return {
            "max_insertions": self.max_insertions,
            "policy": self.policy.value,
            "strategy": self.strategy.value,
            "blend": self.blend.to_dict(),
        }


def default_class_plans() -> dict[ArtifactClass, ClassPlan]:
    """Per-class insertion caps and placement locations used for the published experiments."""
    A = ArtifactClass
    P = PlacementPolicy
    S = Strategy
    return {
        A.AIR: ClassPlan(4, P.WHOLE_SLIDE, S.INSERT),
        A.DUST: ClassPlan(7, P.WHOLE_SLIDE, S.SEAMLESS),
        A.TISSUE_FOLD: ClassPlan(4, P.FOREGROUND, S.INSERT),
        A.INK: ClassPlan(4, P.TISSUE_EDGE, S.INK),
        A.MARKER: ClassPlan(4, P.BACKGROUND, S.INSERT),
        A.FOCUS: ClassPlan(2, P.FOREGROUND, S.FOCUS),
    }


@dataclass
class AugmentationPlan:
    seed: int = 0
    classes: dict[ArtifactClass, ClassPlan] = field(default_factory=default_class_plans)
    rotation_deg: tuple[float, float] = (0.0, 360.0)
    scale: tuple[float, float] = (0.8, 1.2)
    overlap_max_fraction: float = 0.1
    max_retries: int = 25
    max_attempts: int = 1000
    edge_band_px: int = 16
    focus_radius_um: tuple[float, float] = (15.0, 60.0)

    def __post_init__(self):
        self.rotation_deg = tuple(float(v) for v in self.rotation_deg)
        self.scale = tuple(float(v) for v in self.scale)
        self.focus_radius_um = tuple(float(v) for v in self.focus_radius_um)
        self.validate()

    def validate(self):
        lo, hi = self.rotation_deg
        if not (0 <= lo <= hi <= 360):
            raise ConfigError(f"rotation_deg must lie within [0, 360), got {self.rotation_deg}")
        if not (0 < self.scale[0] <= self.scale[1]):
            raise ConfigError(f"scale range must be positive and ordered, got {self.scale}")
        if not (0 < self.focus_radius_um[0] <= self.focus_radius_um[1]):
            raise ConfigError(f"focus_radius_um must be positive and ordered, got {self.focus_radius_um}")
        if not 0 <= self.overlap_max_fraction <= 1:
            raise ConfigError("overlap_max_fraction must lie in [0, 1]")
        if self.max_retries < 1 or self.max_attempts < 1 or self.edge_band_px < 1:
            raise ConfigError("max_retries, max_attempts and edge_band_px must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        for cls, cp in self.classes.items():
            if cp.max_insertions < 0:
                raise ConfigError(f"{cls.value}: max_insertions must be >= 0")
            cp.blend.validate()

    def plan_for(self, cls: ArtifactClass) -> ClassPlan:
        return self.classes.get(cls) or ClassPlan(0, PlacementPolicy.WHOLE_SLIDE, Strategy.INSERT)

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "rotation_deg": list(self.rotation_deg),
            "scale": list(self.scale),
            "overlap_max_fraction": self.overlap_max_fraction,
            "max_retries": self.max_retries,
            "max_attempts": self.max_attempts,
            "edge_band_px": self.edge_band_px,
            "focus_radius_um": list(self.focus_radius_um),
            "classes": {c.value: self.plan_for(c).to_dict() for c in CLASS_ORDER},
        }


@dataclass
class InsertionRecord:
    cls: ArtifactClass
    index: int
    source_id: str
    center: tuple[int, int]
    affine: AffineTransform  # rescaled-specimen pixels -> slide level-0 pixels
    rotation_deg: float
    scale: float
    polygon: PolygonAnnotation
    strategy: Strategy
    bbox: tuple[int, int, int, int]  # x, y, width, height of the specimen on the slide
    attempts: int
    focus_sigma: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "class": self.cls.value,
            "index": self.index,
            "name": self.polygon.name,
            "source_id": self.source_id,
            "center": list(self.center),
            "bbox": list(self.bbox),
            "affine": self.affine.to_list(),
            "rotation_deg": self.rotation_deg,
            "scale": self.scale,
            "strategy": self.strategy.value,
            "focus_sigma": self.focus_sigma,
            "attempts": self.attempts,
        }


@dataclass
class AugmentResult:
    annotations: AnnotationSet
    records: list[InsertionRecord]
    shortfalls: dict[str, int]
    tissue_mask: TissueMask
    skipped_classes: list[str] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        out = {c.value: 0 for c in CLASS_ORDER}
        for r in self.records:
            out[r.cls.value] += 1
        return out


# ---------------------------------------------------------------------------
# specimen preparation


def rescale_to_spacing(s: ArtifactSpecimen, target: PixelSpacing) -> ArtifactSpecimen:
    """Resample a specimen so that one pixel covers the destination's physical size."""
    fx = s.spacing.x_um_per_px / target.x_um_per_px
    fy = s.spacing.y_um_per_px / target.y_um_per_px
    if fx == 1.0 and fy == 1.0:
        return ArtifactSpecimen(s.cls, s.rgb, s.mask, target, s.source_id, s.polygon)
    h, w = resized_dims(s.mask.shape, (fx, fy))
    if h < MIN_SPECIMEN_PX or w < MIN_SPECIMEN_PX:
        raise DegenerateOutput(f"specimen {s.source_id!r} would shrink to {w}x{h} px")
    return ArtifactSpecimen(
        s.cls,
        resize(s.rgb, (fx, fy)),
        np.clip(resize(s.mask, (fx, fy)), 0.0, 1.0),
        target,
        s.source_id,
        transform_polygon(s.polygon, AffineTransform.scaling(fx, fy)),
    )


def specimen_affine(shape, rotation_deg: float, scale: float) -> tuple[AffineTransform, tuple[int, int]]:
    """Rotation+scaling about the specimen centre, shifted so the result's bbox starts at 0."""
    h, w = shape[:2]
    c = (w / 2.0, h / 2.0)
    core = (
        AffineTransform.translation(*c)
        @ AffineTransform.rotation(rotation_deg)
        @ AffineTransform.scaling(scale)
        @ AffineTransform.translation(-c[0], -c[1])
    )
    corners = core.apply([(0, 0), (w, 0), (w, h), (0, h)])
    corners = np.round(corners, 6)
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    out_w = int(math.ceil(hi[0] - lo[0]))
    out_h = int(math.ceil(hi[1] - lo[1]))
    return AffineTransform.translation(-lo[0], -lo[1]) @ core, (out_h, out_w)


def transform_specimen(s: ArtifactSpecimen, rotation_deg: float, scale: float) -> tuple[ArtifactSpecimen, AffineTransform]:
    A, (oh, ow) = specimen_affine(s.mask.shape, rotation_deg, scale)
    if oh < MIN_SPECIMEN_PX or ow < MIN_SPECIMEN_PX:
        raise DegenerateOutput(f"transformed specimen {s.source_id!r} is only {ow}x{oh} px")
    rgb = warp_affine(s.rgb, A, (oh, ow), fill=(255, 255, 255))
    mask = np.clip(warp_affine(s.mask.astype(np.float64), A, (oh, ow), fill=0.0), 0.0, 1.0)
    if not (mask > 0.5).any():
        raise DegenerateOutput(f"transformed specimen {s.source_id!r} lost its mask")
    poly = transform_polygon(s.polygon, A)
    return ArtifactSpecimen(s.cls, rgb, mask, s.spacing, s.source_id, poly), A


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return float(lo) if hi <= lo else float(rng.uniform(lo, hi))


def random_specimen_transform(s: ArtifactSpecimen, plan: AugmentationPlan, rng: np.random.Generator):
    """Random rotation and scaling applied identically to rgb, mask and polygon.

    Returns ``(specimen, affine, rotation_deg, scale)``.
    """
    theta = _uniform(rng, plan.rotation_deg)
    k = _uniform(rng, plan.scale)
    out, A = transform_specimen(s, theta, k)
    return out, A, theta, k


def synthetic_focus_specimen(spacing: PixelSpacing, plan: AugmentationPlan, rng: np.random.Generator) -> ArtifactSpecimen:
    """Elliptical region used when the collection holds no focus shapes; it carries no donor pixels."""
    r_um = _uniform(rng, plan.focus_radius_um)
    aspect = float(rng.uniform(0.6, 1.0))
    rx = r_um / spacing.x_um_per_px
    ry = aspect * r_um / spacing.y_um_per_px
    w, h = int(math.ceil(2 * rx)) + 2, int(math.ceil(2 * ry)) + 2
    poly = ellipse_polygon("focus", ArtifactClass.FOCUS, w / 2.0, h / 2.0, rx, ry)
    mask = rasterize_soft(poly.points, 0, 0, w, h)
    rgb = np.full((h, w, 3), 255, dtype=np.uint8)
    return ArtifactSpecimen(ArtifactClass.FOCUS, rgb, mask, spacing, "synthetic-focus", poly)


# ---------------------------------------------------------------------------
# augmentation


class _Rejected(Exception):
    pass


@dataclass
class _Placed:
    x: int
    y: int
    support: np.ndarray

    def overlap(self, x: int, y: int, support: np.ndarray) -> int:
        h, w = support.shape
        ph, pw = self.support.shape
        x0, y0 = max(x, self.x), max(y, self.y)
        x1, y1 = min(x + w, self.x + pw), min(y + h, self.y + ph)
        if x1 <= x0 or y1 <= y0:
            return 0
        a = support[y0 - y:y1 - y, x0 - x:x1 - x]
        b = self.support[y0 - self.y:y1 - self.y, x0 - self.x:x1 - self.x]
        return int(np.count_nonzero(a & b))


def substream(seed: int, cls: ArtifactClass, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), cls.index, int(index)])


def augment_slide(
    dst: TileStore,
    collection: ArtifactCollection,
    plan: AugmentationPlan,
    tissue_mask: Optional[TissueMask] = None,
    segmenter=segment_tissue,
    threads: int = 1,
) -> AugmentResult:
    """Blend specimens into ``dst`` in place, following ``plan``.

    The tissue mask is computed once, before any insertion. Every insertion
    draws from its own RNG substream keyed by (seed, class, index), so the
    result depends only on the plan, the collection order and the slide.
    """
    if tissue_mask is None:
        tissue_mask = segmenter(dst)
    regions: dict[PlacementPolicy, np.ndarray] = {}
    placed: list[_Placed] = []
    records: list[InsertionRecord] = []
    polygons: list[PolygonAnnotation] = []
    shortfalls: dict[str, int] = {}
    skipped: list[str] = []
    prepared: dict[int, ArtifactSpecimen] = {}

    for cls in CLASS_ORDER:
        cp = plan.plan_for(cls)
        if cp.max_insertions == 0:
            continue
        uses_donor = cp.strategy is not Strategy.FOCUS
        if collection.count(cls) == 0 and (uses_donor or cls is not ArtifactClass.FOCUS):
            logger.warning("collection has no %s specimens; skipping %d insertions", cls.value, cp.max_insertions)
            skipped.append(cls.value)
            shortfalls[cls.value] = cp.max_insertions
            continue
        if cp.policy not in regions:
            regions[cp.policy] = policy_region(tissue_mask, cp.policy, plan.edge_band_px)
        region = regions[cp.policy]

        done = 0
        for i in range(cp.max_insertions):
            rng = substream(plan.seed, cls, i)
            try:
                rec = _insert_one(dst, collection, plan, cp, cls, i, rng, region, tissue_mask,
                                  placed, prepared, threads)
            except EmptyRegion as e:
                logger.warning("%s: %s; no further insertions of this class", cls.value, e)
                break
            if rec is None:
                continue
            records.append(rec)
            polygons.append(rec.polygon)
            done += 1
        if done < cp.max_insertions:
            shortfalls[cls.value] = cp.max_insertions - done

    return AugmentResult(AnnotationSet(tuple(polygons)), records, shortfalls, tissue_mask, skipped)


def _prepare(s: ArtifactSpecimen, target: PixelSpacing, cache: dict) -> ArtifactSpecimen:
    key = id(s)
    if key not in cache:
        cache[key] = rescale_to_spacing(s, target)
    return cache[key]


def _insert_one(dst, collection, plan, cp: ClassPlan, cls, index, rng, region, tissue_mask,
                placed, prepared, threads) -> Optional[InsertionRecord]:
    for attempt in range(1, plan.max_retries + 1):
        try:
            if collection.count(cls):
                base = _prepare(sample_specimen(collection, cls, rng), dst.spacing, prepared)
            else:
                base = synthetic_focus_specimen(dst.spacing, plan, rng)
            spec, A, theta, k = random_specimen_transform(base, plan, rng)
            focus_sigma = _uniform(rng, cp.blend.focus_sigma_range) if cp.strategy is Strategy.FOCUS else None
            cx, cy = sample_insertion_point(region, rng, plan.max_attempts, tissue_mask.downsample)

            h, w = spec.mask.shape
            x0, y0 = cx - w // 2, cy - h // 2
            m = required_margin(cp.strategy, cp.blend, (h, w), focus_sigma or 0.0)
            if x0 - m < 0 or y0 - m < 0 or x0 + w + m > dst.width or y0 + h + m > dst.height:
                raise _Rejected("clipped by the slide edge")
            support = spec.mask > 0.5
            area = int(support.sum())
            for p in placed:
                inter = p.overlap(x0, y0, support)
                if inter and inter > plan.overlap_max_fraction * min(area, int(p.support.sum())):
                    raise _Rejected("overlaps an earlier insertion")

            reg = Region(x0 - m, y0 - m, w + 2 * m, h + 2 * m)
            dst_region = dst.read_region(reg)
            rgb = np.pad(spec.rgb, ((m, m), (m, m), (0, 0)), mode="edge")
            mask = np.pad(spec.mask, m)
            out = apply_strategy(cp.strategy, dst_region, rgb, mask, cp.blend,
                                 focus_sigma=focus_sigma or 0.0, threads=threads)
        except (_Rejected, ExhaustedAttempts, DegenerateOutput, EmptyMask) as e:
            logger.debug("%s #%d attempt %d rejected: %s", cls.value, index, attempt, e)
            continue
        dst.write_region(reg, out)
        placed.append(_Placed(x0, y0, support))
        to_slide = AffineTransform.translation(x0, y0)
        polygon = transform_polygon(spec.polygon, to_slide).with_name(f"{cls.value}_{index}")
        return InsertionRecord(
            cls=cls,
            index=index,
            source_id=spec.source_id,
            center=(int(cx), int(cy)),
            affine=to_slide @ A,
            rotation_deg=theta,
            scale=k,
            polygon=polygon,
            strategy=cp.strategy,
            bbox=(int(x0), int(y0), int(w), int(h)),
            attempts=attempt,
            focus_sigma=focus_sigma,
        )
    logger.info("%s #%d: no valid placement after %d retries", cls.value, index, plan.max_retries)
    return None


def audit_policy(records: list[InsertionRecord], tissue_mask: TissueMask, plan: AugmentationPlan) -> list[str]:
    """Re-check every insertion centre against its class's placement region."""
    violations = []
    cache: dict[PlacementPolicy, np.ndarray] = {}
    for r in records:
        policy = plan.plan_for(r.cls).policy
        if policy not in cache:
            cache[policy] = policy_region(tissue_mask, policy, plan.edge_band_px)
        row, col = tissue_mask.pixel_of(*r.center)
        reg = cache[policy]
        if not (0 <= row < reg.shape[0] and 0 <= col < reg.shape[1] and reg[row, col]):
            violations.append(f"{r.polygon.name} centre {r.center} outside {policy.value}")
    return violations


# ---------------------------------------------------------------------------
# outputs

SLIDE_DIR = "slide"
ANNOTATIONS_FILE = "annotations.xml"
MANIFEST_FILE = "manifest.json"
TISSUE_MASK_FILE = "tissue_mask.png"
FLAT_FILE = "slide.png"


def build_manifest(result: AugmentResult, config: dict) -> dict:
    return {
        "format": "wsiblend-augment-manifest",
        "version": 1,
        "config": config,
        "counts": result.counts(),
        "shortfalls": {k: result.shortfalls[k] for k in sorted(result.shortfalls)},
        "skipped_classes": list(result.skipped_classes),
        "tissue_mask": {"file": TISSUE_MASK_FILE, "level": result.tissue_mask.level,
                        "downsample": result.tissue_mask.downsample},
        "records": [r.to_dict() for r in result.records],
    }


def write_outputs(store: TileStore, result: AugmentResult, out_dir: os.PathLike | str,
                  config: Optional[dict] = None, flat_export: bool = False) -> dict[str, Path]:
    """Write container, annotation XML, tissue mask and run manifest under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        slide_dir = out / SLIDE_DIR
        if store.path is None or Path(store.path).resolve() != slide_dir.resolve():
            store = store.copy_to(slide_dir)
        paths = {"slide": slide_dir}
        write_annotations(result.annotations, out / ANNOTATIONS_FILE)
        paths["annotations"] = out / ANNOTATIONS_FILE
        result.tissue_mask.save(out / TISSUE_MASK_FILE)
        paths["tissue_mask"] = out / TISSUE_MASK_FILE
        manifest = build_manifest(result, config if config is not None else {})
        (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths["manifest"] = out / MANIFEST_FILE
        if flat_export:
            paths["flat"] = export_flat_image(store, 0, out / FLAT_FILE)
    except OSError as e:
        raise IoFailure(f"cannot write outputs to {out}: {e}") from e
    return paths
