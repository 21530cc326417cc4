"""Seeded synthetic benchmark scenes.

Each scene is a smoothed random depth raster viewed by a camera undergoing a
random rigid motion; normal flow is sampled at random pixels by projecting
the exact motion field onto uniformly random unit directions.  Everything is
deterministic in the seed (counter-based Philox generator, so samples are
reproducible across platforms).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import (CameraIntrinsics, RigidMotion, apply_rotation,
                       apply_translation)
from .normal_flow import NormalFlowField, make_field

RNG_NAME = "philox"
DEPTH_SMOOTH_SIGMA = 5.0  # px, low-pass on the white-noise depth texture


@dataclass(frozen=True)
class SceneSpec:
    """Scene generation parameters (defaults match the synthetic benchmark)."""

    width: int = 150
    height: int = 150
    fov_deg: float = 30.0
    max_rotation_deg: float = 20.0   # per frame
    max_translation: float = 3.0     # length units per frame
    min_depth: float = 1.0
    max_depth: float = 10.0
    density: float = 0.10

    def __post_init__(self):
        if not (0 < self.min_depth < self.max_depth):
            raise ValueError("need 0 < min_depth < max_depth")
        if not (0 < self.density <= 1):
            raise ValueError("density must be in (0, 1]")
        if not (0 < self.fov_deg < 180):
            raise ValueError("fov must be in (0, 180) deg")

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.fov_deg, self.width, self.height)


@dataclass(frozen=True)
class SyntheticSample:
    """A generated scene: ground-truth motion, depth raster, normal flow."""

    seed: int
    spec: SceneSpec
    camera: CameraIntrinsics
    motion: RigidMotion
    speed: float
    depth: np.ndarray          # (H, W) depth raster
    field: NormalFlowField
    entry_depths: np.ndarray   # depth at each measurement pixel
    noise_sigma: float = 0.0

    def inverse_depth_scaled(self) -> np.ndarray:
        """Ground-truth scaled inverse depth |t|/Z at each measurement."""
        return self.speed / self.entry_depths

    def inverse_depth_raster(self) -> np.ndarray:
        return self.speed / self.depth


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def generate_scene(seed: int, spec: SceneSpec = SceneSpec()) -> SyntheticSample:
    """Deterministically generate one synthetic scene from a 64-bit seed."""
    rng = _rng(seed)
    w, h = spec.width, spec.height
    cam = spec.camera()

    noise = rng.uniform(0.0, 1.0, size=(h, w))
    smooth = gaussian_filter(noise, DEPTH_SMOOTH_SIGMA, mode="reflect")
    lo, hi = smooth.min(), smooth.max()
    if hi - lo < 1e-15:
        depth = np.full((h, w), 0.5 * (spec.min_depth + spec.max_depth))
    else:
        depth = spec.min_depth + (smooth - lo) * (
            (spec.max_depth - spec.min_depth) / (hi - lo))

    t_dir = rng.normal(size=3)
    t_dir /= np.linalg.norm(t_dir)
    speed = float(rng.uniform(0.1 * spec.max_translation, spec.max_translation))
    w_dir = rng.normal(size=3)
    w_dir /= np.linalg.norm(w_dir)
    w_mag = float(rng.uniform(0.0, np.radians(spec.max_rotation_deg)))
    motion = RigidMotion(t_axis=t_dir, w=w_dir * w_mag)

    n_pts = int(round(spec.density * w * h))
    flat = rng.choice(w * h, size=n_pts, replace=False)
    cols = flat % w
    rows = flat // w
    xs, ys = cam.center_points(cols, rows)
    z = depth[rows, cols]

    ang = rng.uniform(0.0, 2.0 * np.pi, size=n_pts)
    nx = np.cos(ang)
    ny = np.sin(ang)

    at = apply_translation(xs, ys, motion.t_axis, cam)
    bw = apply_rotation(xs, ys, motion.w, cam)
    flow = (speed / z)[:, None] * at + bw
    un = nx * flow[:, 0] + ny * flow[:, 1]

    field = make_field(xs, ys, nx, ny, un, w, h)
    return SyntheticSample(seed=seed, spec=spec, camera=cam, motion=motion,
                           speed=speed, depth=depth, field=field,
                           entry_depths=z)


def add_noise(sample: SyntheticSample, sigma: float, seed: int) -> SyntheticSample:
    """Additive Gaussian noise on the normal speeds, deterministic in seed."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    rng = _rng(seed)
    noisy = sample.field.speeds + sigma * rng.standard_normal(len(sample.field))
    field = replace(sample.field, speeds=noisy)
    return replace(sample, field=field, noise_sigma=sigma)


def save_sample(sample: SyntheticSample, out_dir) -> None:
    """Write a sample as motion.json + depth.f32 + normal_flow.csv + intrinsics.json."""
    from . import dataset_io

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    motion = {
        "schema_version": 1,
        "t_axis": sample.motion.t_axis.tolist(),
        "w": sample.motion.w.tolist(),
        "speed": sample.speed,
        "seed": sample.seed,
        "noise_sigma": sample.noise_sigma,
        "rng": {"name": RNG_NAME, "numpy": np.__version__},
    }
    (out / "motion.json").write_text(json.dumps(motion, indent=2) + "\n")
    dataset_io.save_raster(out / "depth.f32", sample.depth)
    lines = ["x,y,nx,ny,un"]
    f = sample.field
    for i in range(len(f)):
        lines.append(",".join(repr(float(v)) for v in
                              (f.xs[i], f.ys[i], f.nx[i], f.ny[i],
                               f.speeds[i])))
    (out / "normal_flow.csv").write_text("\n".join(lines) + "\n")
    dataset_io.save_intrinsics(out / "intrinsics.json", sample.camera)


def load_field(sample_dir) -> tuple[NormalFlowField, CameraIntrinsics]:
    """Load the normal-flow field and intrinsics of a serialized sample."""
    from . import dataset_io

    d = Path(sample_dir)
    cam = dataset_io.load_intrinsics(d / "intrinsics.json")
    rows = np.loadtxt(d / "normal_flow.csv", delimiter=",", skiprows=1, ndmin=2)
    field = make_field(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3],
                       rows[:, 4], cam.width, cam.height)
    return field, cam
