"""``wsiblend`` command line: extract, augment, patchify, metrics.

Exit codes: 0 success, 1 usage error, 2 input error, 3 runtime failure.
Failures print a single JSON line on stderr, e.g.
``{"error": "UnreadableFile", "message": "...", "exit_code": 2}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .annotations import CLASS_ORDER, read_annotations
from .config import config_help, load_config
from .container import METADATA_NAME, PixelSpacing, TileStore, import_flat_image
from .errors import (
    AllZeroDifferences,
    ConfigError,
    DegeneratePolygon,
    LengthMismatch,
    MalformedTable,
    MalformedXml,
    MissingSpacing,
    OutOfBounds,
    TooFewPairs,
    UnknownClass,
    UnreadableFile,
    UnsupportedGeometry,
    WsiBlendError,
)
from .extraction import ArtifactCollection, extract_artifact, load_collection, save_collection
from .metrics import (
    CONFUSION_LABELS,
    compare_models,
    confusion_with_threshold,
    per_class_report,
    read_predictions,
)
from .patchify import cut_patches
from .pipeline import augment_slide, write_outputs
from .segmentation import load_tissue_mask

logger = logging.getLogger("wsiblend")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3

INPUT_ERRORS = (
    UnreadableFile, MissingSpacing, MalformedXml, UnknownClass, UnsupportedGeometry, DegeneratePolygon,
    ConfigError, MalformedTable, LengthMismatch, TooFewPairs, AllZeroDifferences, OutOfBounds,
    FileNotFoundError,
)


class CliError(Exception):
    def __init__(self, exc: BaseException, code: int, path: Optional[str] = None):
        super().__init__(str(exc))
        self.exc = exc
        self.code = code
        self.path = path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message, EXIT_USAGE)
        sys.exit(EXIT_USAGE)


def _emit_error(kind: str, message: str, code: int, path: Optional[str] = None):
    payload = {"error": kind, "message": message, "exit_code": code}
    if path is not None:
        payload["path"] = path
    print(json.dumps(payload), file=sys.stderr)


def _require(path: Optional[str], what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(FileNotFoundError(f"{what} not found: {path}"), EXIT_INPUT, str(path))
    return p


def _open_slide(path: str, spacing: Optional[float], tile_size: int, threads: int) -> TileStore:
    p = _require(path, "slide")
    if p.is_dir():
        if not (p / METADATA_NAME).exists():
            raise CliError(UnreadableFile(f"{path} is a directory without {METADATA_NAME}"), EXIT_INPUT, path)
        return TileStore.open(p, threads=threads)
    sp = PixelSpacing.isotropic(spacing) if spacing else None
    return import_flat_image(p, tile_size=tile_size, spacing=sp, threads=threads)


def _seed(cfg, args) -> int:
    if args.seed is None and not cfg.seed_given:
        print("notice: no --seed given; using seed 0", file=sys.stderr)
    return int(cfg.plan.seed)


# ---------------------------------------------------------------------------


def cmd_extract(args) -> int:
    cfg = load_config(args.config, {"extract.margin": args.margin})
    store = _open_slide(args.slide, args.spacing, args.tile_size, args.threads)
    anns = read_annotations(_require(args.annotations, "annotations"))
    coll_path = Path(args.collection)
    collection = load_collection(coll_path) if coll_path.exists() else ArtifactCollection()
    for w in collection.load_warnings:
        print(f"warning: {w}", file=sys.stderr)
    stem = Path(args.slide).name
    for ann in anns:
        collection.add(extract_artifact(store, ann, cfg.margin, source_id=f"{stem}:{ann.name}"))
    save_collection(collection, coll_path)
    for name, n in collection.counts().items():
        print(f"{name}\t{n}")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "output.flat_export": True if args.flat_export else None,
                                    "output.tissue_mask": args.tissue_mask,
                                    "output.tissue_mask_level": args.tissue_mask_level})
    seed = _seed(cfg, args)
    src = _open_slide(args.slide, args.spacing, args.tile_size, args.threads)
    collection = load_collection(_require(args.collection, "collection"))
    for w in collection.load_warnings:
        print(f"warning: {w}", file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dst = src.copy_to(out / "slide")
    tissue = None
    if cfg.tissue_mask:
        tissue = load_tissue_mask(_require(cfg.tissue_mask, "tissue mask"), dst,
                                  int(cfg.tissue_mask_level or 0))
    result = augment_slide(dst, collection, cfg.plan, tissue_mask=tissue, threads=args.threads)
    echo = {**cfg.to_dict(), "inputs": {"slide": str(args.slide), "collection": str(args.collection)}}
    echo["seed"] = seed
    write_outputs(dst, result, out, config=echo, flat_export=cfg.flat_export)
    counts = result.counts()
    for name in counts:
        short = result.shortfalls.get(name, 0)
        print(f"{name}\t{counts[name]}\tshortfall={short}")
    return EXIT_OK


def cmd_patchify(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "patchify.per_class": args.per_class,
                                    "patchify.background": args.background})
    seed = _seed(cfg, args)
    store = _open_slide(args.slide, args.spacing, args.tile_size, args.threads)
    anns = read_annotations(_require(args.annotations, "annotations"))
    slide_id = args.slide_id or Path(args.slide).stem
    manifest = cut_patches(store, anns, cfg.patch_per_class, cfg.patch_background, seed=seed,
                           out_dir=args.out, slide_id=slide_id, threshold=cfg.coverage_threshold,
                           threads=args.threads)
    hist = manifest.histogram()
    for name in [c.value for c in CLASS_ORDER] + ["background"]:
        print(f"{name}\t{hist.get(name, 0)}\tshortfall={manifest.shortfalls.get(name, 0)}")
    print(f"total\t{len(manifest.records)}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    cfg = load_config(args.config, {"metrics.threshold": args.threshold,
                                    "metrics.compare_mode": args.compare_mode})
    table = read_predictions(_require(args.predictions, "predictions"))
    report = per_class_report(table)
    print("class\tauc")
    for name, auc in report.items():
        print(f"{name}\t{'absent' if auc is None else f'{auc:.6f}'}")
    cm = confusion_with_threshold(table, cfg.metrics_threshold)
    print()
    print("true\\pred\t" + "\t".join(CONFUSION_LABELS))
    for label, row in zip(CONFUSION_LABELS, cm):
        print(label + "\t" + "\t".join(str(int(v)) for v in row))
    if args.compare:
        other = read_predictions(_require(args.compare, "comparison predictions"))
        results = compare_models(table, other, cfg.compare_mode)
        print()
        print("scope\tn\tW\tp\tmethod")
        for name, res in results.items():
            if isinstance(res, str):
                print(f"{name}\t-\t-\t-\t{res}")
            else:
                print(f"{name}\t{res.n}\t{res.statistic:g}\t{res.pvalue:.6g}\t{res.method}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="wsiblend",
        description="Augment whole-slide images with real, blended artifacts.",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, seeded=False):
        p.add_argument("--config", help="YAML run configuration (see `wsiblend --help`)")
        p.add_argument("--threads", type=int, default=1, help="worker threads (outputs do not depend on it)")
        p.add_argument("--spacing", type=float, help="um/px for flat-image slides without resolution metadata")
        p.add_argument("--tile-size", type=int, default=512, help="tile size when importing a flat image")
        if seeded:
            p.add_argument("--seed", type=int, help="RNG seed (default 0, with a notice)")

    p = sub.add_parser("extract", help="cut annotated artifacts into a collection",
                       epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--slide", required=True, help="tile store directory or lossless flat image")
    p.add_argument("--annotations", required=True, help="ASAP XML with artifact polygons")
    p.add_argument("--collection", required=True, help="collection directory (created or appended to)")
    p.add_argument("--margin", type=int, help="context margin in px (default 8)")
    common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("augment", help="blend collection artifacts into a slide",
                       epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--slide", required=True)
    p.add_argument("--collection", required=True)
    p.add_argument("--out", required=True, help="output directory (slide/, annotations.xml, manifest.json)")
    p.add_argument("--flat-export", action="store_true", help="also write level 0 as slide.png")
    p.add_argument("--tissue-mask", help="binary PNG tissue mask to use instead of segmentation")
    p.add_argument("--tissue-mask-level", type=int, help="pyramid level of --tissue-mask")
    common(p, seeded=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("patchify", help="cut a class-balanced patch dataset",
                       epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--slide", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="directory for patches/ and manifest.csv")
    p.add_argument("--per-class", type=int, help="patches per artifact class")
    p.add_argument("--background", type=int, help="background patches")
    p.add_argument("--slide-id", help="identifier written to the manifest (default: slide file stem)")
    common(p, seeded=True)
    p.set_defaults(func=cmd_patchify)

    p = sub.add_parser("metrics", help="AUC, confusion matrix and Wilcoxon comparison",
                       epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--predictions", required=True, help="prediction table (CSV)")
    p.add_argument("--threshold", type=float, help="background fallback threshold (default 0.5)")
    p.add_argument("--compare", help="second prediction table for a paired Wilcoxon test")
    p.add_argument("--compare-mode", choices=["pooled", "per_class"])
    p.add_argument("--config")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help, --version and usage errors
        return int(e.code or 0)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        _emit_error("UsageError", "--threads must be >= 1", EXIT_USAGE)
        return EXIT_USAGE
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except CliError as e:
        _emit_error(type(e.exc).__name__, str(e.exc), e.code, e.path)
        return e.code
    except INPUT_ERRORS as e:
        _emit_error(type(e).__name__, str(e), EXIT_INPUT, getattr(e, "filename", None))
        return EXIT_INPUT
    except (WsiBlendError, OSError) as e:
        _emit_error(type(e).__name__, str(e), EXIT_RUNTIME)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
