"""Artifact blending strategies and the feathered compositing they share.

Every strategy ends with the same alpha composite, where alpha is the
Gaussian-smoothed artifact mask::

    out = feather(M) * artifact + (1 - feather(M)) * destination

What "artifact" means differs per strategy: donor pixels for markers, air
bubbles and folds; a gradient-domain (Poisson) solution for dust; the
destination recoloured towards the ink's colour statistics for ink; and
the destination's own blurred content for focus.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import ndimage, sparse

from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyMask,
    MaskTouchesBorder,
    SolverDivergedWarning,
)
from .imgproc import (
    apply_lab_stats,
    bilateral_filter,
    gaussian_blur,
    rgb_to_lab_stats,
    to_uint8,
)

logger = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    INSERT = "insert"
    SEAMLESS = "seamless"
    INK = "ink"
    FOCUS = "focus"


@dataclass
class BlendParams:
    mask_feather_sigma: Optional[float] = None  # None: max(3, 1% of specimen diagonal)
    focus_sigma_range: tuple[float, float] = (2.0, 8.0)
    bilateral_sigma_space: float = 3.0
    bilateral_sigma_range: float = 30.0
    poisson_tolerance: float = 1e-6
    poisson_max_iters: Optional[int] = None  # None: 10 * sqrt(|omega|) + 1000
    ink_strength: float = 1.0

    def __post_init__(self):
        self.focus_sigma_range = tuple(float(v) for v in self.focus_sigma_range)
        self.validate()

    def validate(self):
        lo, hi = self.focus_sigma_range
        if self.mask_feather_sigma is not None and self.mask_feather_sigma < 0:
            raise ConfigError("mask_feather_sigma must be >= 0")
        if lo < 0 or hi < lo:
            raise ConfigError(f"focus_sigma_range must satisfy 0 <= lo <= hi, got {self.focus_sigma_range}")
        if self.bilateral_sigma_space <= 0 or self.bilateral_sigma_range <= 0:
            raise ConfigError("bilateral sigmas must be > 0")
        if not 0 < self.poisson_tolerance < 1:
            raise ConfigError("poisson_tolerance must lie in (0, 1)")
        if self.poisson_max_iters is not None and self.poisson_max_iters < 1:
            raise ConfigError("poisson_max_iters must be >= 1")
        if not 0 <= self.ink_strength <= 1:
            raise ConfigError("ink_strength must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["focus_sigma_range"] = list(self.focus_sigma_range)
        return d

    def feather_sigma_for(self, shape) -> float:
        if self.mask_feather_sigma is not None:
            return float(self.mask_feather_sigma)
        return default_feather_sigma(shape)


def default_feather_sigma(shape) -> float:
    h, w = shape[:2]
    return max(3.0, 0.01 * math.hypot(h, w))


def required_margin(strategy: Strategy, params: BlendParams, shape, focus_sigma: float = 0.0) -> int:
    """Context (px) a caller must read around the specimen bbox for ``strategy``."""
    feather = int(math.ceil(3 * params.feather_sigma_for(shape)))
    if strategy is Strategy.INSERT:
        return feather + 2 * int(math.ceil(2 * params.bilateral_sigma_space)) + 1
    if strategy is Strategy.FOCUS:
        return feather + int(math.ceil(3 * focus_sigma)) + 1
    return feather + 2


def _check_dims(*arrays):
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) != 1:
        raise DimensionMismatch(f"raster dimensions differ: {sorted(shapes)}")


def feather_mask(mask: np.ndarray, sigma: float) -> np.ndarray:
    out = gaussian_blur(np.asarray(mask, dtype=np.float64), sigma)
    return np.clip(out, 0.0, 1.0)


def blend_alpha(dst: np.ndarray, src: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """``alpha * src + (1 - alpha) * dst``, rounded half up and clamped to uint8."""
    dst = np.asarray(dst)
    src = np.asarray(src)
    alpha = np.asarray(alpha, dtype=np.float64)
    _check_dims(dst, src, alpha)
    a = alpha[..., None] if dst.ndim == 3 else alpha
    return to_uint8(a * src.astype(np.float64) + (1.0 - a) * dst.astype(np.float64))


def blend_focus(dst_region: np.ndarray, mask: np.ndarray, sigma: float, p: BlendParams) -> np.ndarray:
    """Blur the destination's own pixels under the mask."""
    _check_dims(dst_region, mask)
    blurred = gaussian_blur(dst_region, sigma)
    return blend_alpha(dst_region, blurred, feather_mask(mask, p.feather_sigma_for(mask.shape)))


def _disk_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if not mask.any():
        return mask.copy()
    return ndimage.distance_transform_edt(~mask) <= radius


def blend_insert(dst_region: np.ndarray, specimen_rgb: np.ndarray, mask: np.ndarray, p: BlendParams) -> np.ndarray:
    """Paste donor pixels with a feathered edge, then bilateral-filter around the insertion only."""
    _check_dims(dst_region, specimen_rgb, mask)
    alpha = feather_mask(mask, p.feather_sigma_for(mask.shape))
    composite = blend_alpha(dst_region, specimen_rgb, alpha)
    support = alpha > 0.01
    if not support.any():
        return composite
    support = _disk_dilate(support, int(math.ceil(2 * p.bilateral_sigma_space)))
    filtered = bilateral_filter(composite, p.bilateral_sigma_space, p.bilateral_sigma_range)
    return np.where(support[..., None], filtered, composite)


# ---------------------------------------------------------------------------
# seamless cloning


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual_norm: float
    rhs_norm: float
    converged: bool


def conjugate_gradient(A, b: np.ndarray, x0: Optional[np.ndarray] = None, tol: float = 1e-6,
                       max_iters: int = 1000) -> CGResult:
    """Plain CG for a symmetric positive definite ``A``; stops at ||r|| <= tol * ||b||.

    Returns the iterate with the smallest residual seen if the tolerance is not reached.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    if bnorm == 0.0:
        return CGResult(np.zeros_like(b), 0, 0.0, 0.0, True)
    r = b - A @ x
    rs = float(r @ r)
    best_x, best_res = x.copy(), math.sqrt(rs)
    target = tol * bnorm
    p = r.copy()
    it = 0
    while best_res > target and it < max_iters:
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0:
            break
        step = rs / pAp
        x += step * p
        r -= step * Ap
        rs_new = float(r @ r)
        it += 1
        res = math.sqrt(rs_new)
        if res < best_res:
            best_x, best_res = x.copy(), res
        p = r + (rs_new / rs) * p
        rs = rs_new
    # recompute the true residual of the returned iterate (guards against drift)
    true_res = float(np.linalg.norm(b - A @ best_x))
    return CGResult(best_x, it, true_res, bnorm, true_res <= target)


def poisson_system(dst: np.ndarray, src: np.ndarray, omega: np.ndarray):
    """Five-point Dirichlet system for one channel.

    Unknowns are the pixels of ``omega`` (row-major order). Returns ``(A, b,
    rows, cols)`` with ``A`` sparse SPD, and ``b`` holding the source Laplacian
    plus destination values from the boundary neighbours.
    """
    h, w = omega.shape
    rows, cols = np.nonzero(omega)
    n = rows.size
    index = -np.ones((h, w), dtype=np.int64)
    index[rows, cols] = np.arange(n)
    dst = dst.astype(np.float64)
    src = src.astype(np.float64)
    b = 4.0 * src[rows, cols]
    i_list = [np.arange(n)]
    j_list = [np.arange(n)]
    v_list = [np.full(n, 4.0)]
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nr, nc = rows + dr, cols + dc
        b -= src[nr, nc]
        nb = index[nr, nc]
        inside = nb >= 0
        i_list.append(np.nonzero(inside)[0])
        j_list.append(nb[inside])
        v_list.append(np.full(int(inside.sum()), -1.0))
        b[~inside] += dst[nr[~inside], nc[~inside]]
    A = sparse.csr_matrix(
        (np.concatenate(v_list), (np.concatenate(i_list), np.concatenate(j_list))), shape=(n, n)
    )
    return A, b, rows, cols


def seamless_omega(mask: np.ndarray) -> np.ndarray:
    omega = np.asarray(mask) > 0.5
    if not omega.any():
        raise EmptyMask("seamless cloning needs a mask with interior pixels (> 0.5)")
    if omega[0].any() or omega[-1].any() or omega[:, 0].any() or omega[:, -1].any():
        raise MaskTouchesBorder("mask touches the region border; pad the region before cloning")
    return omega


def solve_poisson_channel(dst: np.ndarray, src: np.ndarray, omega: np.ndarray, tol: float = 1e-6,
                          max_iters: Optional[int] = None) -> tuple[np.ndarray, CGResult]:
    """Float solution for one channel: ``dst`` outside omega, CG solution inside."""
    A, b, rows, cols = poisson_system(dst, src, omega)
    if max_iters is None:
        max_iters = int(10 * math.sqrt(rows.size) + 1000)
    res = conjugate_gradient(A, b, x0=dst[rows, cols].astype(np.float64), tol=tol, max_iters=max_iters)
    out = dst.astype(np.float64).copy()
    out[rows, cols] = res.x
    return out, res


def blend_seamless(dst_region: np.ndarray, specimen_rgb: np.ndarray, mask: np.ndarray, p: BlendParams,
                   threads: int = 1) -> np.ndarray:
    """Gradient-domain clone of the specimen into the destination, then feathered."""
    _check_dims(dst_region, specimen_rgb, mask)
    omega = seamless_omega(mask)

    def solve(c):
        return solve_poisson_channel(dst_region[..., c], specimen_rgb[..., c], omega,
                                     p.poisson_tolerance, p.poisson_max_iters)

    if threads > 1:
        with ThreadPoolExecutor(min(threads, 3)) as ex:
            results = list(ex.map(solve, range(3)))
    else:
        results = [solve(c) for c in range(3)]
    for c, (_, res) in enumerate(results):
        if not res.converged:
            warnings.warn(
                f"Poisson CG on channel {c} stopped at residual {res.residual_norm:.3g} "
                f"(target {p.poisson_tolerance * res.rhs_norm:.3g}) after {res.iterations} iterations",
                SolverDivergedWarning,
                stacklevel=2,
            )
    cloned = to_uint8(np.stack([r[0] for r in results], axis=-1))
    cloned[~omega] = dst_region[~omega]
    return blend_alpha(dst_region, cloned, feather_mask(omega.astype(np.float64), p.feather_sigma_for(mask.shape)))


# ---------------------------------------------------------------------------
# ink


def ink_recolor(dst_region: np.ndarray, specimen_rgb: np.ndarray, specimen_mask: np.ndarray,
                strength: float = 1.0) -> np.ndarray:
    """Destination recoloured towards the ink's l-alpha-beta statistics (float RGB, unclamped)."""
    _check_dims(dst_region, specimen_rgb, specimen_mask)
    ink = rgb_to_lab_stats(specimen_rgb, specimen_mask)
    tissue = rgb_to_lab_stats(dst_region, specimen_mask)
    recolored = apply_lab_stats(dst_region, None, tissue, ink, clamp=False)
    return strength * recolored + (1.0 - strength) * dst_region.astype(np.float64)


def blend_ink(dst_region: np.ndarray, specimen_rgb: np.ndarray, specimen_mask: np.ndarray,
              p: BlendParams) -> np.ndarray:
    """Transfer ink colour onto the destination while keeping its texture."""
    mixed = ink_recolor(dst_region, specimen_rgb, specimen_mask, p.ink_strength)
    alpha = feather_mask(specimen_mask, p.feather_sigma_for(specimen_mask.shape))
    return blend_alpha(dst_region, np.clip(mixed, 0, 255), alpha)


def apply_strategy(strategy: Strategy, dst_region, specimen_rgb, mask, p: BlendParams,
                   focus_sigma: float = 0.0, threads: int = 1) -> np.ndarray:
    if strategy is Strategy.INSERT:
        return blend_insert(dst_region, specimen_rgb, mask, p)
    if strategy is Strategy.SEAMLESS:
        return blend_seamless(dst_region, specimen_rgb, mask, p, threads=threads)
    if strategy is Strategy.INK:
        return blend_ink(dst_region, specimen_rgb, mask, p)
    if strategy is Strategy.FOCUS:
        return blend_focus(dst_region, mask, focus_sigma, p)
    raise ValueError(f"unknown strategy {strategy!r}")
