"""Camera model, instantaneous motion-field equations, and the translation
direction grids used by every solver.

Conventions used throughout the package:

* Image coordinates are measured in pixels from the principal point
  (x right, y down, matching raster row/column order).
* The focal length is in pixels.  Cameras specified by field of view are
  converted with ``f = (width / 2) / tan(fov / 2)``.
* A translation is stored as a unit 3-vector axis plus an optional scalar
  speed, never as a z-normalized 2-vector, so forward-parallel motions
  (t_z close to 0) stay representable.

For a point p = (x, y) the translational and rotational flow Jacobians are

    A(p) = [[-f, 0, x], [0, -f, y]]
    B(p) = [[x*y/f, -(x^2/f) - f, y], [y^2/f + f, -x*y/f, -x]]

and the motion field of a point at depth Z is
``u = (speed / Z) * A(p) @ t_axis + B(p) @ w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GridTooLarge, NonPositiveDepth

# Unit sphere sampling: offset Fibonacci spiral lattice.  BASE_COUNT points at
# level 0, 4x per level, halving the worst nearest-neighbour gap (<= 4 deg at
# level 0, measured 3.69 deg; scales as 1/sqrt(n)).
BASE_COUNT = 3000
MAX_SPHERE_LEVEL = 6
_GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0

_AXIS_DIRECTIONS = np.array(
    [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
)

_grid_cache: dict[int, np.ndarray] = {}
_hemi_cache: dict[int, np.ndarray] = {}


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal length (px), principal point (px), size (px)."""

    focal_length: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ValueError(f"focal_length must be > 0, got {self.focal_length}")
        if not (0 <= self.cx < self.width):
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int) -> "CameraIntrinsics":
        """Build intrinsics from a horizontal field of view in degrees."""
        if not 0.0 < fov_deg < 180.0:
            raise ValueError(f"fov must be in (0, 180) deg, got {fov_deg}")
        f = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return cls(focal_length=f, cx=(width - 1) / 2.0,
                   cy=(height - 1) / 2.0, width=width, height=height)

    def center_points(self, cols, rows):
        """Raster (col, row) indices -> centered pixel coordinates (x, y)."""
        return np.asarray(cols, dtype=float) - self.cx, np.asarray(rows, dtype=float) - self.cy


@dataclass(frozen=True)
class RigidMotion:
    """Instantaneous egomotion: unit translation axis + rotation rate (rad/frame)."""

    t_axis: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_axis, dtype=float).reshape(3)
        w = np.asarray(self.w, dtype=float).reshape(3)
        if abs(np.linalg.norm(t) - 1.0) > 1e-12:
            raise ValueError(f"t_axis must be unit norm, |t|={np.linalg.norm(t)!r}")
        if not np.all(np.isfinite(w)):
            raise ValueError("w must be finite")
        t.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "t_axis", t)
        object.__setattr__(self, "w", w)

    @classmethod
    def from_vectors(cls, t, w) -> "RigidMotion":
        """Normalize t and build a RigidMotion (t must be nonzero)."""
        t = np.asarray(t, dtype=float).reshape(3)
        n = np.linalg.norm(t)
        if n == 0.0:
            raise ValueError("translation axis must be nonzero")
        return cls(t_axis=t / n, w=np.asarray(w, dtype=float).reshape(3))


def translation_matrix(p, cam: CameraIntrinsics) -> np.ndarray:
    """A(p): 2x3 translational flow Jacobian at centered point p."""
    x, y = float(p[0]), float(p[1])
    f = cam.focal_length
    return np.array([[-f, 0.0, x], [0.0, -f, y]])


def rotation_matrix(p, cam: CameraIntrinsics) -> np.ndarray:
    """B(p): 2x3 rotational flow Jacobian at centered point p."""
    x, y = float(p[0]), float(p[1])
    f = cam.focal_length
    return np.array([
        [x * y / f, -(x * x) / f - f, y],
        [(y * y) / f + f, -x * y / f, -x],
    ])


def motion_field(p, depth: float, motion: RigidMotion, speed: float,
                 cam: CameraIntrinsics) -> np.ndarray:
    """Image velocity (u, v) of a scene point at centered position p, depth Z."""
    if depth <= 0:
        raise NonPositiveDepth(f"depth must be > 0, got {depth}")
    a = translation_matrix(p, cam) @ motion.t_axis
    b = rotation_matrix(p, cam) @ motion.w
    return (speed / depth) * a + b


def apply_translation(xs, ys, t_axis, cam: CameraIntrinsics) -> np.ndarray:
    """A(p) @ t for arrays of centered coordinates; returns (N, 2)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    f = cam.focal_length
    return np.stack([-f * t_axis[0] + xs * t_axis[2],
                     -f * t_axis[1] + ys * t_axis[2]], axis=-1)


def apply_rotation(xs, ys, w, cam: CameraIntrinsics) -> np.ndarray:
    """B(p) @ w for arrays of centered coordinates; returns (N, 2)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    f = cam.focal_length
    u = (xs * ys / f) * w[0] + (-(xs * xs) / f - f) * w[1] + ys * w[2]
    v = ((ys * ys) / f + f) * w[0] + (-(xs * ys) / f) * w[1] - xs * w[2]
    return np.stack([u, v], axis=-1)


def motion_field_batch(xs, ys, depths, motion: RigidMotion, speed: float,
                       cam: CameraIntrinsics) -> np.ndarray:
    """Vectorized motion field over arrays of positions/depths; returns (N, 2)."""
    depths = np.asarray(depths, dtype=float)
    if np.any(depths <= 0):
        raise NonPositiveDepth("all depths must be > 0")
    at = apply_translation(xs, ys, motion.t_axis, cam)
    bw = apply_rotation(xs, ys, motion.w, cam)
    return (speed / depths)[..., None] * at + bw


def normal_design_rows(xs, ys, nx, ny, cam: CameraIntrinsics):
    """Per-measurement 3-vectors (n . A(p)) and (n . B(p)).

    These two (N, 3) arrays, together with the normal speeds, are the full
    input of every direct solver: for a candidate motion,
    ``u_n = c * (An @ t) + Bn @ w`` with c the scaled inverse depth.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    nx = np.asarray(nx, dtype=float)
    ny = np.asarray(ny, dtype=float)
    f = cam.focal_length
    an = np.stack([-f * nx, -f * ny, nx * xs + ny * ys], axis=-1)
    bn = np.stack([
        nx * (xs * ys / f) + ny * ((ys * ys) / f + f),
        nx * (-(xs * xs) / f - f) + ny * (-(xs * ys) / f),
        nx * ys - ny * xs,
    ], axis=-1)
    return an, bn


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = (2.0 * np.pi) * ((i / _GOLDEN) % 1.0)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _level_count(level: int) -> int:
    return BASE_COUNT * 4 ** level


def full_sphere_grid(level: int) -> np.ndarray:
    """All lattice directions at a level, over the whole sphere (read-only)."""
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    if level > MAX_SPHERE_LEVEL:
        raise GridTooLarge(
            f"grid level {level} exceeds the configured cap {MAX_SPHERE_LEVEL}")
    cached = _grid_cache.get(level)
    if cached is None:
        cached = _fibonacci_sphere(_level_count(level))
        cached.setflags(write=False)
        _grid_cache[level] = cached
    return cached


def sphere_grid(level: int) -> np.ndarray:
    """Deterministic near-uniform hemisphere (z >= 0) of candidate axes.

    Level L guarantees a worst nearest-neighbour angular gap <= 4 deg / 2**L.
    The +z, +x and +y axis directions are always present.  Antipodal
    directions are equivalent candidates; the solvers resolve the sign.
    """
    cached = _hemi_cache.get(level)
    if cached is not None:
        return cached
    pts = full_sphere_grid(level)
    # even counts: the lattice never lands exactly on the equator
    pts = pts[pts[:, 2] > 0.0]
    pts = np.vstack([pts, _AXIS_DIRECTIONS])
    # dedup exact duplicates (axis points could collide only by construction)
    pts = np.unique(pts, axis=0)
    order = np.lexsort((pts[:, 1], pts[:, 0], -pts[:, 2]))
    pts = np.ascontiguousarray(pts[order])
    pts.setflags(write=False)
    _hemi_cache[level] = pts
    return pts


def cap_grid(level: int, center, radius_deg: float) -> np.ndarray:
    """Lattice directions within an angular cap around ``center`` (signed).

    Unlike :func:`sphere_grid` the result is not folded onto a hemisphere:
    cap candidates keep their sign so a search may straddle the equator.
    """
    center = np.asarray(center, dtype=float).reshape(3)
    center = center / np.linalg.norm(center)
    pts = full_sphere_grid(level)
    keep = pts @ center >= math.cos(math.radians(radius_deg)) - 1e-12
    sel = pts[keep]
    order = np.lexsort((sel[:, 1], sel[:, 0], -sel[:, 2]))
    return np.ascontiguousarray(sel[order])


def angular_distance_deg(a, b) -> float:
    """Angle in degrees between two 3-vectors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def axis_error_deg(estimated, truth) -> float:
    """Sign-insensitive angle between two axes, in degrees."""
    a = np.asarray(estimated, dtype=float)
    b = np.asarray(truth, dtype=float)
    c = abs(float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))))
    return math.degrees(math.acos(min(1.0, c)))
