"""Spatio-temporal gradients and normal-flow extraction.

Normal flow is the component of image motion along the local intensity
gradient: the only flow component measurable from a frame pair without
smoothness assumptions.  At pixels with gradient magnitude above a
threshold, the direction is n = grad(I)/|grad(I)| and the normal speed is
u_n = -I_t / |grad(I)|.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionMismatch
from .geometry import CameraIntrinsics

# Matched 5-tap pair: derivative has exactly unit response on a linear ramp,
# the prefilter sums to one.  Both are exact binary fractions.
DERIV_TAPS = np.array([-1.0, -2.0, 0.0, 2.0, 1.0]) / 8.0
SMOOTH_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_BORDER = 2  # half-width of the 5-tap kernels


@dataclass(frozen=True)
class GradientFrame:
    """Per-pixel spatial and temporal intensity derivatives."""

    ix: np.ndarray
    iy: np.ndarray
    it: np.ndarray
    valid: np.ndarray  # False on the border where the kernels are truncated

    def __post_init__(self):
        shape = self.ix.shape
        for name in ("iy", "it", "valid"):
            if getattr(self, name).shape != shape:
                raise DimensionMismatch(f"{name} shape mismatch")

    @property
    def height(self) -> int:
        return self.ix.shape[0]

    @property
    def width(self) -> int:
        return self.ix.shape[1]


@dataclass(frozen=True)
class NormalFlowField:
    """Sparse normal-flow measurements in centered pixel coordinates.

    Stored as parallel arrays: positions (x, y), unit directions (nx, ny),
    normal speeds u_n (px/frame) and gradient magnitudes.
    """

    xs: np.ndarray
    ys: np.ndarray
    nx: np.ndarray
    ny: np.ndarray
    speeds: np.ndarray
    grad_mags: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        n = len(self.xs)
        for name in ("ys", "nx", "ny", "speeds", "grad_mags"):
            if len(getattr(self, name)) != n:
                raise DimensionMismatch(f"{name} length mismatch")
        if n:
            norms = np.hypot(self.nx, self.ny)
            if np.any(np.abs(norms - 1.0) > 1e-12):
                raise ValueError("directions must be unit vectors")

    def __len__(self) -> int:
        return len(self.xs)

    @property
    def positions(self) -> np.ndarray:
        return np.stack([self.xs, self.ys], axis=-1)

    @property
    def directions(self) -> np.ndarray:
        return np.stack([self.nx, self.ny], axis=-1)

    def density(self) -> float:
        return len(self) / float(self.width * self.height)


def make_field(xs, ys, nx, ny, speeds, width, height,
               grad_mags=None) -> NormalFlowField:
    """Build a NormalFlowField from plain arrays, normalizing dtypes."""
    xs = np.asarray(xs, dtype=float)
    if grad_mags is None:
        grad_mags = np.zeros_like(xs)
    return NormalFlowField(
        xs=xs,
        ys=np.asarray(ys, dtype=float),
        nx=np.asarray(nx, dtype=float),
        ny=np.asarray(ny, dtype=float),
        speeds=np.asarray(speeds, dtype=float),
        grad_mags=np.asarray(grad_mags, dtype=float),
        width=int(width),
        height=int(height),
    )


def compute_gradients(prev: np.ndarray, next_: np.ndarray) -> GradientFrame:
    """Spatio-temporal derivatives of a frame pair (intensities in [0, 1]).

    Spatial derivatives are taken on the two-frame average with the matched
    derivative/prefilter pair; the temporal difference is smoothed by the
    same prefilter.  The two-pixel border is flagged invalid.
    """
    prev = np.asarray(prev, dtype=float)
    next_ = np.asarray(next_, dtype=float)
    if prev.shape != next_.shape or prev.ndim != 2:
        raise DimensionMismatch(
            f"frame shapes differ: {prev.shape} vs {next_.shape}")
    avg = 0.5 * (prev + next_)
    ix = correlate1d(avg, DERIV_TAPS, axis=1, mode="nearest")
    ix = correlate1d(ix, SMOOTH_TAPS, axis=0, mode="nearest")
    iy = correlate1d(avg, DERIV_TAPS, axis=0, mode="nearest")
    iy = correlate1d(iy, SMOOTH_TAPS, axis=1, mode="nearest")
    it = next_ - prev
    it = correlate1d(it, SMOOTH_TAPS, axis=0, mode="nearest")
    it = correlate1d(it, SMOOTH_TAPS, axis=1, mode="nearest")
    valid = np.zeros(prev.shape, dtype=bool)
    if prev.shape[0] > 2 * _BORDER and prev.shape[1] > 2 * _BORDER:
        valid[_BORDER:-_BORDER, _BORDER:-_BORDER] = True
    return GradientFrame(ix=ix, iy=iy, it=it, valid=valid)


def extract_normal_flow(g: GradientFrame, mag_threshold: float,
                        cam: CameraIntrinsics) -> NormalFlowField:
    """Normal flow at valid pixels whose gradient magnitude is >= threshold."""
    if not mag_threshold > 0:
        raise ValueError(f"mag_threshold must be > 0, got {mag_threshold}")
    mag = np.hypot(g.ix, g.iy)
    keep = g.valid & (mag >= mag_threshold)
    rows, cols = np.nonzero(keep)
    m = mag[rows, cols]
    xs, ys = cam.center_points(cols, rows)
    return NormalFlowField(
        xs=xs, ys=ys,
        nx=g.ix[rows, cols] / m,
        ny=g.iy[rows, cols] / m,
        speeds=-g.it[rows, cols] / m,
        grad_mags=m,
        width=g.width, height=g.height,
    )


def threshold_for_density(g: GradientFrame, target_density: float) -> float:
    """Gradient-magnitude threshold yielding roughly the target density."""
    if not 0 < target_density <= 1:
        raise ValueError(f"target density must be in (0, 1], got {target_density}")
    mags = np.hypot(g.ix, g.iy)[g.valid]
    if mags.size == 0:
        return np.inf
    q = np.quantile(mags, 1.0 - target_density)
    return max(float(q), 1e-12)


def project_flow(flow: np.ndarray, directions: np.ndarray,
                 cam: CameraIntrinsics, mask: np.ndarray | None = None) -> NormalFlowField:
    """Project a dense flow raster onto per-pixel unit directions.

    ``flow`` and ``directions`` are (H, W, 2); u_n = n . u exactly at every
    selected pixel (no thresholding).
    """
    flow = np.asarray(flow, dtype=float)
    directions = np.asarray(directions, dtype=float)
    if flow.shape != directions.shape or flow.ndim != 3 or flow.shape[2] != 2:
        raise DimensionMismatch(
            f"flow {flow.shape} and directions {directions.shape} must both be (H, W, 2)")
    h, w = flow.shape[:2]
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    elif mask.shape != (h, w):
        raise DimensionMismatch("mask shape mismatch")
    rows, cols = np.nonzero(mask)
    nx = directions[rows, cols, 0]
    ny = directions[rows, cols, 1]
    un = nx * flow[rows, cols, 0] + ny * flow[rows, cols, 1]
    xs, ys = cam.center_points(cols, rows)
    return NormalFlowField(
        xs=xs, ys=ys, nx=nx, ny=ny, speeds=un,
        grad_mags=np.zeros_like(un), width=w, height=h,
    )
