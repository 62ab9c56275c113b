"""Whole-slide image augmentation with real, blended artifacts."""

__version__ = "0.1.0"

from .annotations import AnnotationSet, ArtifactClass, PolygonAnnotation, parse_annotations, serialize_annotations
from .container import PixelSpacing, Region, TileStore, create_store, read_region, write_region
from .extraction import ArtifactCollection, ArtifactSpecimen, extract_artifact, load_collection, save_collection
from .pipeline import AugmentationPlan, augment_slide

__all__ = [
    "AnnotationSet", "ArtifactClass", "PolygonAnnotation", "parse_annotations", "serialize_annotations",
    "PixelSpacing", "Region", "TileStore", "create_store", "read_region", "write_region",
    "ArtifactCollection", "ArtifactSpecimen", "extract_artifact", "load_collection", "save_collection",
    "AugmentationPlan", "augment_slide",
]
