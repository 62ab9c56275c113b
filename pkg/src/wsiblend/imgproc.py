"""Raster primitives shared by the blending strategies.

Conventions: RGB rasters are ``(H, W, 3)`` uint8 arrays, scalar rasters
(soft masks) are ``(H, W)`` float arrays in [0, 1]. Pixel ``(row, col)``
covers the unit square ``[col, col+1) x [row, row+1)`` in continuous
coordinates, so its centre sits at ``(col + 0.5, row + 0.5)``. Affine
transforms and polygon rasterization both use this convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateOutput,
    EmptyMask,
    NegativeSigma,
    NonPositiveSigma,
    SingularTransform,
)

Factor = Union[float, Sequence[float]]


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Round half up and clamp to [0, 255]."""
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def _like(result: np.ndarray, template: np.ndarray) -> np.ndarray:
    if template.dtype == np.uint8:
        return to_uint8(result)
    return result


# ---------------------------------------------------------------------------
# affine transforms


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix mapping continuous pixel coordinates ``(x, y)``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(2, 3)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]]))

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None) -> "AffineTransform":
        sy = sx if sy is None else sy
        return cls(np.array([[sx, 0.0, 0.0], [0.0, sy, 0.0]]))

    @classmethod
    def rotation(cls, degrees: float, center: tuple[float, float] = (0.0, 0.0)) -> "AffineTransform":
        """Counter-clockwise on screen (y pointing down) about ``center``."""
        t = math.radians(degrees)
        c, s = math.cos(t), math.sin(t)
        if float(degrees) % 90 == 0:
            c, s = float(round(c)), float(round(s))  # exact quarter turns
        cx, cy = center
        rot = cls(np.array([[c, s, 0.0], [-s, c, 0.0]]))
        return cls.translation(cx, cy) @ rot @ cls.translation(-cx, -cy)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.linear))

    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    def __matmul__(self, other: "AffineTransform") -> "AffineTransform":
        return AffineTransform((self.homogeneous() @ other.homogeneous())[:2])

    def check_invertible(self):
        if not np.all(np.isfinite(self.matrix)) or abs(self.determinant) < 1e-12:
            raise SingularTransform(f"affine transform is not invertible (det={self.determinant:g})")

    def inverse(self) -> "AffineTransform":
        self.check_invertible()
        return AffineTransform(np.linalg.inv(self.homogeneous())[:2])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts @ self.linear.T + self.matrix[:, 2]

    def to_list(self) -> list[list[float]]:
        return self.matrix.tolist()


# ---------------------------------------------------------------------------
# filtering


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, radius ceil(3 sigma), reflected borders. sigma=0 is a no-op."""
    if sigma < 0:
        raise NegativeSigma(f"sigma must be >= 0, got {sigma}")
    img = np.asarray(img)
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img.astype(np.float64), k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return _like(out, img)


def bilateral_filter(img: np.ndarray, sigma_space: float = 3.0, sigma_range: float = 30.0) -> np.ndarray:
    """Per-channel bilateral filter over a square window of radius ceil(2 sigma_space)."""
    if sigma_space <= 0 or sigma_range <= 0:
        raise NonPositiveSigma(
            f"bilateral sigmas must be > 0, got space={sigma_space}, range={sigma_range}"
        )
    img = np.asarray(img)
    src = img.astype(np.float64)
    if src.ndim == 2:
        src = src[..., None]
    h, w = src.shape[:2]
    r = int(math.ceil(2 * sigma_space))
    padded = np.pad(src, ((r, r), (r, r), (0, 0)), mode="symmetric")
    num = np.zeros_like(src)
    den = np.zeros_like(src)
    inv_s = 1.0 / (2 * sigma_space * sigma_space)
    inv_r = 1.0 / (2 * sigma_range * sigma_range)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = padded[r + dy:r + dy + h, r + dx:r + dx + w]
            diff = shifted - src
            wgt = math.exp(-(dx * dx + dy * dy) * inv_s) * np.exp(-(diff * diff) * inv_r)
            num += wgt * shifted
            den += wgt
    out = num / den
    if img.ndim == 2:
        out = out[..., 0]
    return _like(out, img)


# ---------------------------------------------------------------------------
# resampling


def _bilinear(src: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill=None) -> np.ndarray:
    """Sample ``src`` at array-index coordinates. ``fill=None`` clamps to the edge."""
    h, w = src.shape[:2]
    # snap round-off so exact grid positions reproduce source pixels bit-exactly
    rx, ry = np.rint(sx), np.rint(sy)
    sx = np.where(np.abs(sx - rx) < 1e-9, rx, sx)
    sy = np.where(np.abs(sy - ry) < 1e-9, ry, sy)
    if fill is None:
        sx = np.clip(sx, 0, w - 1)
        sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    extra = src.shape[2:]
    out = np.zeros(sx.shape + extra, dtype=np.float64)
    fill_arr = None if fill is None else np.broadcast_to(np.asarray(fill, dtype=np.float64), extra)
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            wgt = wy * wx
            if not np.any(wgt):
                continue
            xi, yi = x0 + ox, y0 + oy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = src[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)].astype(np.float64)
            if fill_arr is not None:
                vals = np.where(valid[(...,) + (None,) * len(extra)], vals, fill_arr)
            out += wgt[(...,) + (None,) * len(extra)] * vals
    return out


def warp_affine(img: np.ndarray, A: AffineTransform, out_dims: tuple[int, int], fill=0) -> np.ndarray:
    """Inverse-map every output pixel through ``A`` and sample bilinearly.

    ``out_dims`` is ``(height, width)``. Samples falling outside the source
    blend towards ``fill``; soft masks stay soft.
    """
    inv = A.inverse()
    img = np.asarray(img)
    oh, ow = int(out_dims[0]), int(out_dims[1])
    if oh < 1 or ow < 1:
        raise DegenerateOutput(f"output dimensions must be >= 1, got {oh}x{ow}")
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    cx, cy = xs + 0.5, ys + 0.5
    m = inv.matrix
    sx = m[0, 0] * cx + m[0, 1] * cy + m[0, 2] - 0.5
    sy = m[1, 0] * cx + m[1, 1] * cy + m[1, 2] - 0.5
    return _like(_bilinear(img, sx, sy, fill=fill), img)


def _factors(factor: Factor) -> tuple[float, float]:
    if np.ndim(factor) == 0:
        return float(factor), float(factor)
    fx, fy = factor
    return float(fx), float(fy)


def resized_dims(shape: tuple[int, ...], factor: Factor) -> tuple[int, int]:
    fx, fy = _factors(factor)
    return int(round(shape[0] * fy)), int(round(shape[1] * fx))


def resize(img: np.ndarray, factor: Factor) -> np.ndarray:
    """Bilinear resampling by ``factor`` (scalar, or ``(fx, fy)``); dims are rounded."""
    fx, fy = _factors(factor)
    if fx <= 0 or fy <= 0:
        raise DegenerateOutput(f"resize factor must be positive, got {factor!r}")
    img = np.asarray(img)
    oh, ow = resized_dims(img.shape, (fx, fy))
    if oh < 1 or ow < 1:
        raise DegenerateOutput(f"resizing {img.shape[:2]} by {factor!r} gives {oh}x{ow}")
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    sx = (xs + 0.5) / fx - 0.5
    sy = (ys + 0.5) / fy - 0.5
    return _like(_bilinear(img, sx, sy, fill=None), img)


# ---------------------------------------------------------------------------
# l-alpha-beta colour statistics (Reinhard et al. colour transfer)

RGB_TO_LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)
LOG_LMS_TO_LAB = np.diag([1 / math.sqrt(3), 1 / math.sqrt(6), 1 / math.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
LAB_TO_LOG_LMS = np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -2.0, 0.0],
]) @ np.diag([math.sqrt(3) / 3, math.sqrt(6) / 6, math.sqrt(2) / 2])
LMS_FLOOR = 1e-2  # only pure black reaches it


@dataclass(frozen=True)
class LabStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    lms = np.asarray(rgb, dtype=np.float64) @ RGB_TO_LMS.T
    return np.log10(np.maximum(lms, LMS_FLOOR)) @ LOG_LMS_TO_LAB.T


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`; returns unclamped float RGB."""
    lms = 10.0 ** (np.asarray(lab, dtype=np.float64) @ LAB_TO_LOG_LMS.T)
    return lms @ LMS_TO_RGB.T


def _weights(mask: np.ndarray) -> np.ndarray:
    sel = np.asarray(mask) > 0.5
    if not sel.any():
        raise EmptyMask("mask has no pixel with weight > 0.5")
    return sel


def lab_stats(lab: np.ndarray, mask: np.ndarray) -> LabStats:
    vals = lab[_weights(mask)]
    return LabStats(vals.mean(axis=0), vals.std(axis=0))


def rgb_to_lab_stats(img: np.ndarray, mask: np.ndarray) -> LabStats:
    """Per-channel mean/std in l-alpha-beta over pixels with mask > 0.5."""
    return lab_stats(rgb_to_lab(img), mask)


def transfer_lab(lab: np.ndarray, src: LabStats, dst: LabStats) -> np.ndarray:
    scale = np.where(src.std < 1e-6, 1.0, dst.std / np.where(src.std < 1e-6, 1.0, src.std))
    return (lab - src.mean) * scale + dst.mean


def apply_lab_stats(
    img: np.ndarray,
    mask: np.ndarray | None,
    src_stats: LabStats,
    dst_stats: LabStats,
    clamp: bool = True,
) -> np.ndarray:
    """Move colour statistics from ``src_stats`` to ``dst_stats``.

    Pixels whose mask weight is 0 are returned unchanged (pass ``mask=None``
    to recolour everything). Channels with a near-zero source std are only
    shifted. With ``clamp=False`` the raw float RGB is returned.
    """
    img = np.asarray(img)
    out = lab_to_rgb(transfer_lab(rgb_to_lab(img), src_stats, dst_stats))
    if mask is not None:
        keep = np.asarray(mask) <= 0
        out[keep] = img[keep]
    return to_uint8(out) if clamp else out


def match_lab_stats(img: np.ndarray, mask: np.ndarray, target: LabStats) -> np.ndarray:
    """Recolour ``img`` so its masked statistics become ``target``."""
    return apply_lab_stats(img, mask, rgb_to_lab_stats(img, mask), target)
