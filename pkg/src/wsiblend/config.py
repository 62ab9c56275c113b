"""Run configuration: one YAML file covering augmentation, patching and metrics.

Unknown keys are rejected. ``CONFIG_KEYS`` documents every accepted key and
feeds the CLI ``--help`` text.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from .annotations import CLASS_ORDER, ArtifactClass
from .blending import BlendParams, Strategy
from .errors import ConfigError, UnreadableFile
from .pipeline import AugmentationPlan, ClassPlan, default_class_plans
from .segmentation import PlacementPolicy

BLEND_KEYS = {
    "mask_feather_sigma": "Gaussian sigma (px) of the feathering mask; null = max(3, 1% of specimen diagonal)",
    "focus_sigma_range": "[lo, hi] blur sigma (px, level 0) drawn uniformly for focus insertions",
    "bilateral_sigma_space": "bilateral filter spatial sigma (px) after marker/air/fold insertion",
    "bilateral_sigma_range": "bilateral filter range sigma (intensity, 0-255)",
    "poisson_tolerance": "relative residual at which the seamless-cloning CG solve stops",
    "poisson_max_iters": "CG iteration cap; null = 10*sqrt(|mask|) + 1000",
    "ink_strength": "0-1 interpolation between the original tissue colour and full ink colour transfer",
}

CLASS_KEYS = {
    "max_insertions": "maximum number of insertions of this class per slide",
    "policy": "placement region: whole_slide | foreground | tissue_edge | background",
    "strategy": "blending strategy: insert | seamless | ink | focus",
    "blend": "per-class overrides of any blend.* key",
}

CONFIG_KEYS: dict[str, str] = {
    "seed": "64-bit RNG seed; every insertion draws from a substream of (seed, class, index)",
    "rotation_deg": "[lo, hi] rotation range in degrees, within [0, 360)",
    "scale": "[lo, hi] random scaling range applied after pixel-spacing rescale",
    "overlap_max_fraction": "reject an insertion overlapping an earlier one by more than this fraction of the smaller area",
    "max_retries": "placement attempts per insertion before it is skipped",
    "max_attempts": "rejection-sampling draws per insertion-point sample",
    "edge_band_px": "half-width (tissue-mask pixels) of the tissue_edge placement band",
    "focus_radius_um": "[lo, hi] radius (um) of synthetic focus regions when the collection has no focus shapes",
    **{f"blend.{k}": v for k, v in BLEND_KEYS.items()},
    **{f"classes.<class>.{k}": v for k, v in CLASS_KEYS.items()},
    "extract.margin": "context margin (px, level 0) kept around each extracted polygon",
    "output.flat_export": "also write the augmented level 0 as a single PNG",
    "output.tissue_mask": "optional binary PNG used instead of automatic tissue segmentation",
    "output.tissue_mask_level": "pyramid level the supplied tissue mask corresponds to",
    "patchify.per_class": "patches to sample per artifact class",
    "patchify.background": "artifact-free background patches to sample",
    "patchify.coverage_threshold": "minimum polygon coverage fraction for a patch to carry a class label",
    "metrics.threshold": "score threshold below which a patch is predicted as background",
    "metrics.compare_mode": "Wilcoxon pairing for --compare: pooled | per_class",
}


def config_help() -> str:
    lines = ["config file keys (YAML; <class> is one of "
             + ", ".join(c.value for c in CLASS_ORDER) + "):"]
    width = max(len(k) for k in CONFIG_KEYS)
    for k, v in CONFIG_KEYS.items():
        lines.append(f"  {k.ljust(width)}  {v}")
    return "\n".join(lines)


@dataclass
class RunConfig:
    plan: AugmentationPlan = field(default_factory=AugmentationPlan)
    blend: BlendParams = field(default_factory=BlendParams)
    margin: int = 8
    flat_export: bool = False
    tissue_mask: Optional[str] = None
    tissue_mask_level: Optional[int] = None
    patch_per_class: int = 50
    patch_background: int = 50
    coverage_threshold: float = 0.05
    metrics_threshold: float = 0.5
    compare_mode: str = "pooled"
    seed_given: bool = False

    def to_dict(self) -> dict:
        plan = self.plan.to_dict()
        return {
            **plan,
            "blend": self.blend.to_dict(),
            "extract": {"margin": self.margin},
            "output": {
                "flat_export": self.flat_export,
                "tissue_mask": self.tissue_mask,
                "tissue_mask_level": self.tissue_mask_level,
            },
            "patchify": {
                "per_class": self.patch_per_class,
                "background": self.patch_background,
                "coverage_threshold": self.coverage_threshold,
            },
            "metrics": {"threshold": self.metrics_threshold, "compare_mode": self.compare_mode},
        }


def _reject_unknown(d: dict, allowed, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown config key(s) {', '.join((where + '.' if where else '') + k for k in extra)}")


def _blend(base: BlendParams, overrides: dict, where: str) -> BlendParams:
    _reject_unknown(overrides, BLEND_KEYS, where)
    merged = {**base.to_dict(), **overrides}
    try:
        return BlendParams(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def build_config(data: Optional[dict] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Resolve defaults <- ``data`` (parsed file) <- ``overrides`` (CLI flags, dotted keys)."""
    data = copy.deepcopy(data or {})
    top = {k.split(".")[0] for k in CONFIG_KEYS}
    _reject_unknown(data, top, "")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value

    try:
        blend = _blend(BlendParams(), data.get("blend", {}) or {}, "blend")
        classes = default_class_plans()
        for cp in classes.values():
            cp.blend = copy.deepcopy(blend)
        raw_classes = data.get("classes", {}) or {}
        if not isinstance(raw_classes, dict):
            raise ConfigError("classes must be a mapping")
        for name, entry in raw_classes.items():
            cls = ArtifactClass.parse(name)
            entry = entry or {}
            _reject_unknown(entry, CLASS_KEYS, f"classes.{name}")
            cp = classes[cls]
            classes[cls] = ClassPlan(
                int(entry.get("max_insertions", cp.max_insertions)),
                PlacementPolicy(entry.get("policy", cp.policy.value)),
                Strategy(entry.get("strategy", cp.strategy.value)),
                _blend(blend, entry.get("blend", {}) or {}, f"classes.{name}.blend"),
            )
        plan_kwargs = {k: data[k] for k in ("seed", "rotation_deg", "scale", "overlap_max_fraction",
                                            "max_retries", "max_attempts", "edge_band_px",
                                            "focus_radius_um") if k in data}
        plan = AugmentationPlan(classes=classes, **plan_kwargs)

        sections = {}
        for sec in ("extract", "output", "patchify", "metrics"):
            sub = data.get(sec, {}) or {}
            _reject_unknown(sub, [k.split(".", 1)[1] for k in CONFIG_KEYS if k.startswith(sec + ".")], sec)
            sections[sec] = sub
        cfg = RunConfig(
            plan=plan,
            blend=blend,
            margin=int(sections["extract"].get("margin", 8)),
            flat_export=bool(sections["output"].get("flat_export", False)),
            tissue_mask=sections["output"].get("tissue_mask"),
            tissue_mask_level=sections["output"].get("tissue_mask_level"),
            patch_per_class=int(sections["patchify"].get("per_class", 50)),
            patch_background=int(sections["patchify"].get("background", 50)),
            coverage_threshold=float(sections["patchify"].get("coverage_threshold", 0.05)),
            metrics_threshold=float(sections["metrics"].get("threshold", 0.5)),
            compare_mode=str(sections["metrics"].get("compare_mode", "pooled")),
            seed_given="seed" in data,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    if cfg.margin < 0:
        raise ConfigError("extract.margin must be >= 0")
    if cfg.compare_mode not in ("pooled", "per_class"):
        raise ConfigError("metrics.compare_mode must be pooled or per_class")
    if not 0 < cfg.metrics_threshold < 1:
        raise ConfigError("metrics.threshold must lie in (0, 1)")
    if not 0 < cfg.coverage_threshold <= 1:
        raise ConfigError("patchify.coverage_threshold must lie in (0, 1]")
    return cfg


def load_config(path: Optional[os.PathLike | str], overrides: Optional[dict] = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise UnreadableFile(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"{path} is not valid YAML: {e}") from e
    return build_config(data, overrides)
