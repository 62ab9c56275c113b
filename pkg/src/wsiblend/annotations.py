"""Typed polygon annotations and the ASAP XML dialect.

Documents look like::

    <ASAP_Annotations>
      <Annotations>
        <Annotation Name="a0" Type="Polygon" PartOfGroup="air" Color="#64FE2E">
          <Coordinates>
            <Coordinate Order="0" X="10.0" Y="12.5" />
            ...
          </Coordinates>
        </Annotation>
      </Annotations>
      <AnnotationGroups>
        <Group Name="air" PartOfGroup="None" Color="#64FE2E"><Attributes /></Group>
      </AnnotationGroups>
    </ASAP_Annotations>
"""

from __future__ import annotations

import enum
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
import numpy as np

from .container import Region
from .errors import DegeneratePolygon, MalformedXml, UnknownClass, UnsupportedGeometry
from .imgproc import AffineTransform


class ArtifactClass(enum.Enum):
    AIR = "air"
    DUST = "dust"
    TISSUE_FOLD = "tissue"
    INK = "ink"
    MARKER = "marker"
    FOCUS = "focus"

    @classmethod
    def parse(cls, name: str) -> "ArtifactClass":
        key = str(name).strip().lower()
        for c in cls:
            if c.value == key or c.name.lower() == key:
                return c
        raise UnknownClass(name)

    @property
    def index(self) -> int:
        return CLASS_ORDER.index(self)


CLASS_ORDER: tuple[ArtifactClass, ...] = tuple(ArtifactClass)

GROUP_COLORS = {
    ArtifactClass.AIR: "#64FE2E",
    ArtifactClass.DUST: "#0000FF",
    ArtifactClass.TISSUE_FOLD: "#00FF00",
    ArtifactClass.INK: "#FF0000",
    ArtifactClass.MARKER: "#FFFF00",
    ArtifactClass.FOCUS: "#AA00FF",
}


@dataclass(frozen=True)
class PolygonAnnotation:
    name: str
    cls: ArtifactClass
    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 3:
            raise DegeneratePolygon(f"polygon {self.name!r} has {len(verts)} vertices, need >= 3")
        if not all(math.isfinite(v) for xy in verts for v in xy):
            raise DegeneratePolygon(f"polygon {self.name!r} has non-finite coordinates")
        object.__setattr__(self, "vertices", verts)

    @property
    def points(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=np.float64)

    def bbox(self) -> tuple[float, float, float, float]:
        p = self.points
        return float(p[:, 0].min()), float(p[:, 1].min()), float(p[:, 0].max()), float(p[:, 1].max())

    def area(self) -> float:
        """Shoelace area (absolute)."""
        x, y = self.points.T
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    def perimeter(self) -> float:
        p = self.points
        return float(np.linalg.norm(np.roll(p, -1, axis=0) - p, axis=1).sum())

    def translated(self, dx: float, dy: float) -> "PolygonAnnotation":
        return transform_polygon(self, AffineTransform.translation(dx, dy))

    def with_name(self, name: str) -> "PolygonAnnotation":
        return PolygonAnnotation(name, self.cls, self.vertices)

    def almost_equal(self, other: "PolygonAnnotation", tol: float = 1e-4) -> bool:
        return (
            self.name == other.name
            and self.cls is other.cls
            and len(self.vertices) == len(other.vertices)
            and bool(np.all(np.abs(self.points - other.points) <= tol))
        )


@dataclass(frozen=True)
class AnnotationSet:
    annotations: tuple[PolygonAnnotation, ...] = ()
    groups: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))
        names = list(self.groups)
        for a in self.annotations:
            if a.cls.value not in names:
                names.append(a.cls.value)
        object.__setattr__(self, "groups", tuple(names))

    def __len__(self):
        return len(self.annotations)

    def __iter__(self):
        return iter(self.annotations)

    def of_class(self, cls: ArtifactClass) -> list[PolygonAnnotation]:
        return [a for a in self.annotations if a.cls is cls]

    def almost_equal(self, other: "AnnotationSet", tol: float = 1e-4) -> bool:
        return len(self) == len(other) and all(
            a.almost_equal(b, tol) for a, b in zip(self.annotations, other.annotations)
        )


def parse_annotations(xml_text: str | bytes) -> AnnotationSet:
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as e:
        raise MalformedXml(f"annotation XML is not well-formed: {e}") from e
    container = root.find("Annotations")
    if container is None:
        raise MalformedXml(f"<{root.tag}> has no <Annotations> element")

    groups = []
    group_el = root.find("AnnotationGroups")
    if group_el is not None:
        for g in group_el.findall("Group"):
            name = g.get("Name")
            if name is not None:
                groups.append(ArtifactClass.parse(name).value)

    annotations = []
    for i, el in enumerate(container.findall("Annotation")):
        name = el.get("Name", f"Annotation {i}")
        geometry = el.get("Type", "Polygon")
        if geometry.lower() != "polygon":
            raise UnsupportedGeometry(f"annotation {name!r} has geometry {geometry!r}; only Polygon is supported")
        group = el.get("PartOfGroup")
        if group is None:
            raise MalformedXml(f"annotation {name!r} has no PartOfGroup")
        cls = ArtifactClass.parse(group)
        coords_el = el.find("Coordinates")
        coords = [] if coords_el is None else coords_el.findall("Coordinate")
        try:
            ordered = sorted(
                enumerate(coords),
                key=lambda ic: (float(ic[1].get("Order", ic[0])), ic[0]),
            )
            verts = [(float(c.get("X")), float(c.get("Y"))) for _, c in ordered]
        except (TypeError, ValueError) as e:
            raise MalformedXml(f"annotation {name!r} has a bad coordinate: {e}") from e
        annotations.append(PolygonAnnotation(name, cls, verts))
    return AnnotationSet(tuple(annotations), tuple(groups))


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def serialize_annotations(annset: AnnotationSet) -> str:
    root = ET.Element("ASAP_Annotations")
    anns = ET.SubElement(root, "Annotations")
    for a in annset.annotations:
        el = ET.SubElement(anns, "Annotation", {
            "Name": a.name,
            "Type": "Polygon",
            "PartOfGroup": a.cls.value,
            "Color": GROUP_COLORS[a.cls],
        })
        coords = ET.SubElement(el, "Coordinates")
        for i, (x, y) in enumerate(a.vertices):
            ET.SubElement(coords, "Coordinate", {"Order": str(i), "X": _fmt(x), "Y": _fmt(y)})
    groups = ET.SubElement(root, "AnnotationGroups")
    for name in annset.groups:
        cls = ArtifactClass.parse(name)
        g = ET.SubElement(groups, "Group", {"Name": cls.value, "PartOfGroup": "None",
                                            "Color": GROUP_COLORS[cls]})
        ET.SubElement(g, "Attributes")
    ET.indent(root, space="  ")
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"


def read_annotations(path) -> AnnotationSet:
    with open(path, "rb") as f:
        return parse_annotations(f.read())


def write_annotations(annset: AnnotationSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize_annotations(annset))


def rasterize_points(points: np.ndarray, x0: float, y0: float, width: int, height: int,
                     scale: float = 1.0) -> np.ndarray:
    """Even-odd fill of a closed polygon sampled at pixel centres.

    Output pixel ``(r, c)`` samples the point ``(x0 + (c + 0.5) / scale,
    y0 + (r + 0.5) / scale)``. Each scanline toggles at every edge crossing
    strictly left of a pixel centre, then a running parity fills the row.
    """
    pts = np.asarray(points, dtype=np.float64)
    px = (pts[:, 0] - x0) * scale
    py = (pts[:, 1] - y0) * scale
    ax, ay = px, py
    bx, by = np.roll(px, -1), np.roll(py, -1)
    cy = np.arange(height, dtype=np.float64) + 0.5
    # edge e crosses scanline y iff min(ay, by) <= y < max(ay, by)
    lo, hi = np.minimum(ay, by), np.maximum(ay, by)
    crosses = (lo[None, :] <= cy[:, None]) & (cy[:, None] < hi[None, :])
    rows, edges = np.nonzero(crosses)
    toggles = np.zeros((height, width + 1), dtype=np.int32)
    if rows.size:
        # multiply before dividing: exact for integer vertices, so ties at centres resolve consistently
        xc = ax[edges] + (cy[rows] - ay[edges]) * (bx[edges] - ax[edges]) / (by[edges] - ay[edges])
        # first column whose centre lies strictly right of the crossing
        col = np.floor(xc - 0.5).astype(np.int64) + 1
        col = np.clip(col, 0, width)
        np.add.at(toggles, (rows, col), 1)
    parity = np.cumsum(toggles[:, :width], axis=1) & 1
    return parity.astype(bool)


def rasterize_polygon(p: PolygonAnnotation, bounds: Region) -> np.ndarray:
    """Binary mask of ``p`` over ``bounds`` (level-0 coordinates)."""
    return rasterize_points(p.points, bounds.x, bounds.y, bounds.width, bounds.height)


def rasterize_soft(points: np.ndarray, x0: float, y0: float, width: int, height: int,
                   supersample: int = 2) -> np.ndarray:
    """Anti-aliased coverage mask: even-odd fill on a ``supersample``-times finer grid, box-averaged."""
    s = int(supersample)
    fine = rasterize_points(points, x0, y0, width * s, height * s, scale=s)
    return fine.reshape(height, s, width, s).mean(axis=(1, 3))


def transform_polygon(p: PolygonAnnotation, A: AffineTransform) -> PolygonAnnotation:
    A.check_invertible()
    verts = A.apply(p.points)
    return PolygonAnnotation(p.name, p.cls, tuple(map(tuple, verts)))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def ellipse_polygon(name: str, cls: ArtifactClass, cx: float, cy: float, rx: float, ry: float,
                    n: int = 32, rotation_deg: float = 0.0) -> PolygonAnnotation:
    t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    x, y = rx * np.cos(t), ry * np.sin(t)
    r = math.radians(rotation_deg)
    xr = cx + x * math.cos(r) - y * math.sin(r)
    yr = cy + x * math.sin(r) + y * math.cos(r)
    return PolygonAnnotation(name, cls, tuple(zip(xr.tolist(), yr.tolist())))
