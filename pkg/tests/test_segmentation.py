import numpy as np
import pytest
from scipy import stats

from wsiblend.container import PixelSpacing, Region, create_store
from wsiblend.errors import EmptyRegion, ExhaustedAttempts, InvalidDimensions
from wsiblend.segmentation import (
    PlacementPolicy,
    TissueMask,
    load_tissue_mask,
    policy_region,
    sample_insertion_point,
    segment_tissue,
    segmentation_level,
)

SP = PixelSpacing(0.5, 0.5)


def disk_mask(n, cx, cy, r):
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def test_segment_pink_disk():
    n = 512
    s = create_store(n, n, 256, SP)
    img = np.full((n, n, 3), 250, np.uint8)
    d = disk_mask(n, 256, 256, 150)
    img[d] = (220, 120, 180)
    s.write_region(Region(0, 0, n, n), img)
    tm = segment_tissue(s)
    assert tm.level == 0 and tm.mask.shape == (n, n)
    from scipy import ndimage
    grown = ndimage.binary_dilation(d, iterations=2)
    shrunk = ndimage.binary_erosion(d, iterations=2)
    assert (tm.mask <= grown).all() and (shrunk <= tm.mask).all()
    assert np.array_equal(segment_tissue(s).mask, tm.mask)  # deterministic


def test_segment_flat_slides():
    white = create_store(300, 200, 128, SP)
    assert not segment_tissue(white).mask.any()
    pink = create_store(300, 200, 128, SP, fill=(255, 0, 128))
    assert segment_tissue(pink).mask.all()


def test_segmentation_level_choice():
    s = create_store(5000, 3000, 512, SP)
    lv = segmentation_level(s)
    assert max(s.levels[lv].width, s.levels[lv].height) >= 1024
    assert lv + 1 == len(s.levels) or max(s.levels[lv + 1].width, s.levels[lv + 1].height) < 1024
    assert segmentation_level(create_store(600, 600, 128, SP)) == 0


def test_policy_regions_partition():
    m = TissueMask(disk_mask(64, 32, 32, 20), 0, 1)
    fg = policy_region(m, PlacementPolicy.FOREGROUND)
    bg = policy_region(m, PlacementPolicy.BACKGROUND)
    assert not (fg & bg).any() and (fg | bg).all()
    assert policy_region(m, PlacementPolicy.WHOLE_SLIDE).all()
    full = TissueMask(np.ones((10, 10), bool), 0, 1)
    assert not policy_region(full, PlacementPolicy.BACKGROUND).any()
    with pytest.raises(ValueError):
        policy_region(m, PlacementPolicy.TISSUE_EDGE, 0)


def test_tissue_edge_is_annulus():
    n, r, band = 96, 25.0, 3
    m = TissueMask(disk_mask(n, 48, 48, r), 0, 1)
    edge = policy_region(m, PlacementPolicy.TISSUE_EDGE, band)
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    dist = np.abs(np.hypot(xx - 48, yy - 48) - r)
    assert edge.any()
    assert dist[edge].max() <= band + 1.0  # pixel-centre discretisation of the boundary
    assert edge[48, int(48 + r)] and not edge[48, 48]


def test_tissue_edge_ignores_slide_border():
    m = np.zeros((50, 50), bool)
    m[:, :25] = True  # tissue touching the slide's left border
    edge = policy_region(TissueMask(m, 0, 1), PlacementPolicy.TISSUE_EDGE, 4)
    assert not edge[:, :15].any() and edge[:, 22:28].all()


def test_sampling_basic_cases():
    rng = np.random.default_rng(0)
    ones = np.ones((10, 10), bool)
    x, y = sample_insertion_point(ones, rng, max_attempts=1)
    assert 0 <= x < 10 and 0 <= y < 10
    with pytest.raises(EmptyRegion):
        sample_insertion_point(np.zeros((10, 10), bool), rng)
    tiny = np.zeros((100, 100), bool)
    tiny[5, 5] = True
    with pytest.raises(ExhaustedAttempts):
        sample_insertion_point(tiny, np.random.default_rng(1), max_attempts=3)
    a = [sample_insertion_point(ones, np.random.default_rng(5), downsample=4) for _ in range(2)]
    assert a[0] == a[1]


def test_sampling_uniform_over_half_plane():
    region = np.zeros((64, 64), bool)
    region[:, 32:] = True
    rng = np.random.default_rng(2)
    pts = np.array([sample_insertion_point(region, rng) for _ in range(10_000)])
    assert region[pts[:, 1], pts[:, 0]].all()
    hist, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=[np.linspace(32, 64, 9), np.linspace(0, 64, 9)])
    assert stats.chisquare(hist.ravel()).pvalue > 0.01


def test_sampled_points_respect_policy_after_downsampling():
    m = TissueMask(disk_mask(64, 32, 32, 20), 2, 4)
    rng = np.random.default_rng(3)
    for policy in PlacementPolicy:
        region = policy_region(m, policy, 3)
        for _ in range(1000):
            x, y = sample_insertion_point(region, rng, downsample=4)
            assert region[m.pixel_of(x, y)]


def test_load_external_mask(tmp_path):
    from PIL import Image
    s = create_store(1000, 600, 256, SP)
    lv = s.levels[1]
    arr = np.zeros((lv.height, lv.width), np.uint8)
    arr[50:100, 60:200] = 255
    Image.fromarray(arr).save(tmp_path / "m.png")
    tm = load_tissue_mask(tmp_path / "m.png", s, 1)
    assert tm.downsample == 2 and tm.mask.sum() == 50 * 140
    with pytest.raises(InvalidDimensions):
        load_tissue_mask(tmp_path / "m.png", s, 0)
