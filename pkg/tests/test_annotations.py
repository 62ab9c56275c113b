import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from wsiblend.annotations import (
    AnnotationSet,
    ArtifactClass,
    PolygonAnnotation,
    ellipse_polygon,
    mask_iou,
    parse_annotations,
    rasterize_polygon,
    rasterize_soft,
    serialize_annotations,
    transform_polygon,
)
from wsiblend.container import Region
from wsiblend.errors import DegeneratePolygon, MalformedXml, SingularTransform, UnknownClass, UnsupportedGeometry
from wsiblend.imgproc import AffineTransform, warp_affine

TRIANGLE = """<?xml version="1.0"?>
<ASAP_Annotations>
  <Annotations>
    <Annotation Name="bubble" Type="Polygon" PartOfGroup="{group}" Color="#F4FA58">
      <Coordinates>
        <Coordinate Order="0" X="10" Y="10" />
        <Coordinate Order="2" X="10" Y="30" />
        <Coordinate Order="1" X="30.25" Y="10" />
      </Coordinates>
    </Annotation>
  </Annotations>
  <AnnotationGroups><Group Name="{group}" PartOfGroup="None" Color="#000000"><Attributes /></Group></AnnotationGroups>
</ASAP_Annotations>
"""


def pnpoly(verts, x, y):
    """Independent ray-casting point-in-polygon (even-odd)."""
    inside = False
    n = len(verts)
    for i in range(n):
        (xi, yi), (xj, yj) = verts[i], verts[(i + 1) % n]
        if (yi <= y < yj) or (yj <= y < yi):
            xc = xi + (y - yi) * (xj - xi) / (yj - yi)
            if xc < x:
                inside = not inside
    return inside


def brute_mask(verts, region: Region):
    out = np.zeros((region.height, region.width), bool)
    for r in range(region.height):
        for c in range(region.width):
            out[r, c] = pnpoly(verts, region.x + c + 0.5, region.y + r + 0.5)
    return out


def test_parse_triangle_sorted_by_order():
    s = parse_annotations(TRIANGLE.format(group="Air"))
    assert len(s) == 1
    p = s.annotations[0]
    assert p.cls is ArtifactClass.AIR and p.name == "bubble"
    assert p.vertices == ((10.0, 10.0), (30.25, 10.0), (10.0, 30.0))


def test_parse_class_names():
    assert ArtifactClass.parse("TISSUE") is ArtifactClass.TISSUE_FOLD
    assert ArtifactClass.parse(" ink ") is ArtifactClass.INK
    with pytest.raises(UnknownClass) as e:
        parse_annotations(TRIANGLE.format(group="pen"))
    assert e.value.name == "pen"


def test_parse_errors():
    with pytest.raises(MalformedXml):
        parse_annotations("<ASAP_Annotations><Annotations>")
    with pytest.raises(MalformedXml):
        parse_annotations("<Foo />")
    with pytest.raises(UnsupportedGeometry):
        parse_annotations(TRIANGLE.format(group="air").replace('Type="Polygon"', 'Type="Spline"'))
    two = TRIANGLE.format(group="air").replace('<Coordinate Order="2" X="10" Y="30" />', "")
    with pytest.raises(DegeneratePolygon):
        parse_annotations(two)
    with pytest.raises(MalformedXml):
        parse_annotations(TRIANGLE.format(group="air").replace('X="10" Y="30"', 'X="ten" Y="30"'))


def test_polygon_invariants():
    with pytest.raises(DegeneratePolygon):
        PolygonAnnotation("a", ArtifactClass.AIR, ((0, 0), (1, 1)))
    with pytest.raises(ValueError):
        PolygonAnnotation("a", ArtifactClass.AIR, ((0, 0), (1, 1), (float("inf"), 0)))


def test_serialize_empty_and_single():
    text = serialize_annotations(AnnotationSet(()))
    assert "<Annotations" in text and "<Annotation " not in text
    assert len(parse_annotations(text)) == 0
    p = PolygonAnnotation("x", ArtifactClass.DUST, ((0.123456, 1), (2, 3), (4, 5.5)))
    text = serialize_annotations(AnnotationSet((p,)))
    assert text.count("<Annotation ") == 1 and text.count("<Coordinate ") == 3
    assert 'Order="2"' in text and 'X="0.123456"' in text


coord = st.floats(-1e5, 1e5, allow_nan=False, allow_infinity=False)
polygon = st.builds(
    PolygonAnnotation,
    st.text(st.characters(blacklist_categories=("Cs", "Cc")), max_size=12),
    st.sampled_from(list(ArtifactClass)),
    st.lists(st.tuples(coord, coord), min_size=3, max_size=12).map(tuple),
)


@settings(max_examples=100, deadline=None)
@given(st.lists(polygon, max_size=8))
def test_round_trip_property(polys):
    s = AnnotationSet(tuple(polys))
    once = parse_annotations(serialize_annotations(s))
    assert once.almost_equal(s, 1e-4)
    assert serialize_annotations(once) == serialize_annotations(parse_annotations(serialize_annotations(once)))


def test_large_set_round_trip():
    rng = np.random.default_rng(0)
    polys = []
    for i in range(2618):
        cls = list(ArtifactClass)[i % 6]
        n = int(rng.integers(3, 20))
        polys.append(PolygonAnnotation(f"p{i}", cls, tuple(map(tuple, rng.uniform(0, 1e5, (n, 2))))))
    s = AnnotationSet(tuple(polys))
    assert parse_annotations(serialize_annotations(s)).almost_equal(s, 1e-4)


def test_rasterize_square():
    sq = PolygonAnnotation("s", ArtifactClass.INK, ((10, 10), (20, 10), (20, 20), (10, 20)))
    m = rasterize_polygon(sq, Region(0, 0, 32, 32))
    assert m.sum() == 100 and m[10:20, 10:20].all()
    np.testing.assert_array_equal(m, brute_mask(sq.vertices, Region(0, 0, 32, 32)))


def test_rasterize_outside_is_empty():
    tri = PolygonAnnotation("t", ArtifactClass.INK, ((100, 100), (120, 100), (110, 130)))
    assert not rasterize_polygon(tri, Region(0, 0, 32, 32)).any()


def test_bowtie_even_odd_matches_oracle():
    bow = PolygonAnnotation("b", ArtifactClass.INK, ((2, 2), (28, 28), (28, 2), (2, 28)))
    r = Region(0, 0, 30, 30)
    np.testing.assert_array_equal(rasterize_polygon(bow, r), brute_mask(bow.vertices, r))
    star = PolygonAnnotation("s", ArtifactClass.INK, tuple(
        (15 + 13 * np.cos(a), 15 + 13 * np.sin(a)) for a in np.arange(5) * 4 * np.pi / 5))
    np.testing.assert_array_equal(rasterize_polygon(star, r), brute_mask(star.vertices, r))
    assert not rasterize_polygon(star, r)[15, 15]  # even-odd leaves the pentagon core empty


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 45), st.floats(-5, 45)), min_size=3, max_size=9),
       st.integers(-3, 3), st.integers(-3, 3))
def test_rasterize_matches_pnpoly(verts, ox, oy):
    r = Region(ox, oy, 40, 40)
    try:
        p = PolygonAnnotation("r", ArtifactClass.DUST, tuple(verts))
    except DegeneratePolygon:
        return
    np.testing.assert_array_equal(rasterize_polygon(p, r), brute_mask(p.vertices, r))


@settings(max_examples=60, deadline=None)
@given(st.floats(5, 60), st.floats(5, 60), st.floats(0, 180), st.floats(0, 1), st.floats(0, 1))
def test_convex_area_close_to_shoelace(rx, ry, rot, fx, fy):
    p = ellipse_polygon("e", ArtifactClass.AIR, 70 + fx, 70 + fy, rx, ry, 24, rot)
    m = rasterize_polygon(p, Region(0, 0, 140, 140))
    assert abs(m.sum() - p.area()) <= 2 * p.perimeter()


def test_soft_mask_bounds_and_area():
    p = ellipse_polygon("e", ArtifactClass.AIR, 20, 20, 12, 8)
    m = rasterize_soft(p.points, 0, 0, 40, 40)
    assert 0 <= m.min() and m.max() <= 1
    assert abs(m.sum() - p.area()) < 0.05 * p.area()


def test_transform_identity_and_scale():
    p = ellipse_polygon("e", ArtifactClass.AIR, 20, 20, 12, 8, n=7)
    assert transform_polygon(p, AffineTransform.identity()).almost_equal(p, 1e-12)
    q = transform_polygon(p, AffineTransform.scaling(2.0))
    d = lambda pts: np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    np.testing.assert_allclose(d(q.points), 2 * d(p.points), atol=1e-9)
    assert q.name == p.name and q.cls is p.cls


def test_rotate_square_about_center():
    sq = PolygonAnnotation("s", ArtifactClass.INK, ((10, 10), (20, 10), (20, 20), (10, 20)))
    q = transform_polygon(sq, AffineTransform.rotation(90, center=(15, 15)))
    # positive angles turn counter-clockwise as displayed (y axis pointing down)
    assert q.vertices == ((10.0, 20.0), (10.0, 10.0), (20.0, 10.0), (20.0, 20.0))
    assert set(q.vertices) == set(sq.vertices)


def test_singular_transform_rejected():
    p = ellipse_polygon("e", ArtifactClass.AIR, 20, 20, 12, 8)
    with pytest.raises(SingularTransform):
        transform_polygon(p, AffineTransform(np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]])))


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 360), st.floats(0.7, 1.4), st.floats(16, 30), st.floats(0.5, 1.0))
def test_transform_rasterize_commute(theta, k, r, aspect):
    assume(2 * r * k >= 32)  # convex shapes with diameter >= 32 px after the transform
    size = 80
    p = ellipse_polygon("e", ArtifactClass.AIR, size / 2, size / 2, r, r * aspect, 24)
    # specimen masks are anti-aliased, so the warped raster is the soft one
    m = rasterize_soft(p.points, 0, 0, size, size)
    A = AffineTransform.translation(size / 2, size / 2) @ AffineTransform.rotation(theta) \
        @ AffineTransform.scaling(k) @ AffineTransform.translation(-size / 2, -size / 2)
    warped = warp_affine(m, A, (size, size), fill=0.0) >= 0.5
    direct = rasterize_polygon(transform_polygon(p, A), Region(0, 0, size, size))
    assert mask_iou(warped, direct) >= 0.95
