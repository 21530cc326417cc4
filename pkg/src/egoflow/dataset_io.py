"""Sequence, flow, pose and raster I/O plus trajectory integration.

File formats:

* Flow files: Middlebury .flo (magic bytes "PIEH", little-endian int32
  width/height, row-major interleaved float32 (u, v); magnitudes above 1e9
  mark unknown values).
* Pose files: one 3x4 row-major rigid transform per line (12 floats,
  world-from-camera), the KITTI odometry convention.
* Structure rasters: 8-byte header (u32 width, u32 height, little endian)
  followed by row-major little-endian float32.
* Intrinsics sidecar: JSON {focal_px, cx, cy, width, height}.
"""

from __future__ import annotations

import glob
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .errors import (BadMagic, InconsistentDimensions, LengthMismatch,
                     NonOrthonormalRotation, ParseError, TruncatedFile,
                     UnsupportedFormat)
from .geometry import CameraIntrinsics, RigidMotion

FLO_MAGIC = b"PIEH"
FLO_UNKNOWN = 1e9
_IMAGE_SUFFIXES = {".png", ".pgm"}


@dataclass(frozen=True)
class FrameSequence:
    """Ordered grayscale frames with (possibly fractional) time indices."""

    frames: np.ndarray       # (T, H, W) float in [0, 1]
    timestamps: np.ndarray   # (T,) float frame indices
    intrinsics: CameraIntrinsics | None = None
    synthetic: np.ndarray | None = None  # True where a frame was interpolated

    def __post_init__(self):
        if len(self.frames) != len(self.timestamps):
            raise InconsistentDimensions("frames vs timestamps length")
        if self.synthetic is None:
            object.__setattr__(self, "synthetic",
                               np.zeros(len(self.frames), dtype=bool))

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class PoseGroundTruth:
    """Per-frame world-from-camera rigid transforms (rotation + position)."""

    transforms: np.ndarray  # (N, 3, 4)

    def __len__(self) -> int:
        return len(self.transforms)

    @property
    def rotations(self) -> np.ndarray:
        return self.transforms[:, :, :3]

    @property
    def positions(self) -> np.ndarray:
        return self.transforms[:, :, 3]

    def speeds(self) -> np.ndarray:
        """Translational speed per frame step, |p_{k+1} - p_k|."""
        d = np.diff(self.positions, axis=0)
        return np.linalg.norm(d, axis=1)

    def frame_motions(self) -> tuple[list[RigidMotion], np.ndarray]:
        """Per-step camera-frame motions by pose differencing.

        w is the rotation log of R_k^T R_{k+1}; the translation axis is
        R_k^T (p_{k+1} - p_k) normalized.  Steps with zero displacement get
        the axis (0, 0, 1) and zero speed.
        """
        motions = []
        speeds = self.speeds()
        for k in range(len(self) - 1):
            r_rel = self.rotations[k].T @ self.rotations[k + 1]
            w = Rotation.from_matrix(r_rel).as_rotvec()
            dp = self.rotations[k].T @ (self.positions[k + 1] -
                                        self.positions[k])
            n = np.linalg.norm(dp)
            axis = dp / n if n > 0 else np.array([0.0, 0.0, 1.0])
            motions.append(RigidMotion(t_axis=axis, w=w))
        return motions, speeds


@dataclass(frozen=True)
class Trajectory:
    """Integrated camera positions, starting at the origin."""

    positions: np.ndarray  # (N, 3)

    def __len__(self) -> int:
        return len(self.positions)

    def to_csv(self, path) -> None:
        lines = ["frame,x,y,z"]
        for k, p in enumerate(self.positions):
            lines.append(f"{k}," + ",".join(repr(float(v)) for v in p))
        Path(path).write_text("\n".join(lines) + "\n")

    def to_svg(self, path, size: int = 600) -> None:
        """X-Z top-down plot as a standalone SVG polyline."""
        xs = self.positions[:, 0]
        zs = self.positions[:, 2]
        span = max(float(xs.max() - xs.min()), float(zs.max() - zs.min()), 1e-9)
        pad = 0.05 * span
        scale = (size - 20) / (span + 2 * pad)
        px = (xs - xs.min() + pad) * scale + 10
        py = size - ((zs - zs.min() + pad) * scale + 10)
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
        svg = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
            f'height="{size}" viewBox="0 0 {size} {size}">\n'
            f'<rect width="100%" height="100%" fill="white"/>\n'
            f'<polyline points="{pts}" fill="none" stroke="black" '
            f'stroke-width="1.5"/>\n'
            f'<circle cx="{px[0]:.2f}" cy="{py[0]:.2f}" r="4" fill="green"/>\n'
            f'<circle cx="{px[-1]:.2f}" cy="{py[-1]:.2f}" r="4" fill="red"/>\n'
            "</svg>\n")
        Path(path).write_text(svg)


def _load_gray(path: Path) -> np.ndarray:
    if path.suffix.lower() not in _IMAGE_SUFFIXES:
        raise UnsupportedFormat(f"unsupported image format: {path.name}")
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.dtype == np.uint8:
        return arr.astype(float) / 255.0
    if arr.dtype in (np.uint16, np.int32):
        return arr.astype(float) / 65535.0
    return arr.astype(float)


def load_intrinsics(path) -> CameraIntrinsics:
    d = json.loads(Path(path).read_text())
    return CameraIntrinsics(focal_length=float(d["focal_px"]),
                            cx=float(d["cx"]), cy=float(d["cy"]),
                            width=int(d["width"]), height=int(d["height"]))


def save_intrinsics(path, cam: CameraIntrinsics) -> None:
    d = {"focal_px": cam.focal_length, "cx": cam.cx, "cy": cam.cy,
         "width": cam.width, "height": cam.height}
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


def load_sequence(pattern, fov_deg: float | None = None) -> FrameSequence:
    """Load a grayscale sequence from a glob pattern or directory.

    Intrinsics come from an intrinsics.json sidecar next to the frames, or
    from ``fov_deg``; otherwise they are left unset.
    """
    p = Path(pattern)
    if p.is_dir():
        files = sorted(q for q in p.iterdir()
                       if q.suffix.lower() in _IMAGE_SUFFIXES)
        sidecar = p / "intrinsics.json"
    else:
        files = [Path(q) for q in sorted(glob.glob(str(pattern)))]
        sidecar = (files[0].parent / "intrinsics.json") if files else None
    if not files:
        raise FileNotFoundError(f"no frames match {pattern!r}")
    frames = [_load_gray(f) for f in files]
    shape = frames[0].shape
    for f, a in zip(files, frames):
        if a.shape != shape:
            raise InconsistentDimensions(
                f"{f.name} is {a.shape}, expected {shape}")
    cam = None
    if sidecar is not None and sidecar.exists():
        cam = load_intrinsics(sidecar)
    elif fov_deg is not None:
        cam = CameraIntrinsics.from_fov(fov_deg, shape[1], shape[0])
    return FrameSequence(frames=np.stack(frames),
                         timestamps=np.arange(len(frames), dtype=float),
                         intrinsics=cam)


def load_flo(path):
    """Middlebury flow file -> ((H, W, 2) float32 raster, known mask)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: {len(raw)} bytes")
    if raw[:4] != FLO_MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise TruncatedFile(f"{path}: need {need} bytes, have {len(raw)}")
    data = np.frombuffer(raw[12:need], dtype="<f4").reshape(h, w, 2)
    known = np.all(np.abs(data) <= FLO_UNKNOWN, axis=2)
    return data.copy(), known


def save_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def load_poses(path) -> PoseGroundTruth:
    """KITTI-style pose file: 12 whitespace-separated floats per line."""
    mats = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 12:
            raise ParseError(f"{path}:{ln}: expected 12 fields, got {len(parts)}")
        try:
            vals = np.array([float(x) for x in parts])
        except ValueError as exc:
            raise ParseError(f"{path}:{ln}: {exc}") from exc
        mats.append(vals.reshape(3, 4))
    if not mats:
        raise ParseError(f"{path}: no poses")
    transforms = np.stack(mats)
    for k, m in enumerate(transforms):
        r = m[:, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            warnings.warn(f"pose {k}: rotation not orthonormal",
                          NonOrthonormalRotation)
    return PoseGroundTruth(transforms=transforms)


def save_poses(path, poses: PoseGroundTruth) -> None:
    lines = []
    for m in poses.transforms:
        lines.append(" ".join(repr(float(v)) for v in m.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def interpolate_frames(seq: FrameSequence, target_max_disp: float,
                       disp_hint: float) -> FrameSequence:
    """Insert linearly blended frames to cap the per-step displacement.

    ceil(disp_hint / target_max_disp) - 1 frames go between each original
    pair; original frames are kept bit-exact and synthetic ones flagged.
    """
    if target_max_disp >= disp_hint or len(seq) < 2:
        return seq
    k = math.ceil(disp_hint / target_max_disp) - 1
    frames = [seq.frames[0]]
    times = [seq.timestamps[0]]
    synth = [False]
    for i in range(len(seq) - 1):
        a, b = seq.frames[i], seq.frames[i + 1]
        ta, tb = seq.timestamps[i], seq.timestamps[i + 1]
        for j in range(1, k + 1):
            alpha = j / (k + 1)
            frames.append((1.0 - alpha) * a + alpha * b)
            times.append(ta + alpha * (tb - ta))
            synth.append(True)
        frames.append(b)
        times.append(tb)
        synth.append(False)
    return FrameSequence(frames=np.stack(frames), timestamps=np.array(times),
                         intrinsics=seq.intrinsics,
                         synthetic=np.array(synth))


def integrate_trajectory(motions, speeds) -> Trajectory:
    """Compose per-frame motions into camera positions from the origin.

    R_{k+1} = R_k expm([w_k]x), p_{k+1} = p_k + speed_k * R_k t_k.
    """
    motions = list(motions)
    speeds = np.asarray(speeds, dtype=float)
    if len(motions) != len(speeds):
        raise LengthMismatch(f"{len(motions)} motions vs {len(speeds)} speeds")
    positions = np.zeros((len(motions) + 1, 3))
    r = np.eye(3)
    for k, m in enumerate(motions):
        positions[k + 1] = positions[k] + speeds[k] * (r @ m.t_axis)
        r = r @ Rotation.from_rotvec(m.w).as_matrix()
    return Trajectory(positions=positions)


def aggregate_subframe_motions(motions, speeds):
    """Collapse consecutive sub-frame motions into one per-frame motion.

    Rotations compose; the translation axis is the speed-weighted mean of
    the sub-frame axes (rotated into the first sub-frame), normalized.
    """
    motions = list(motions)
    speeds = np.asarray(speeds, dtype=float)
    if len(motions) != len(speeds):
        raise LengthMismatch(f"{len(motions)} motions vs {len(speeds)} speeds")
    r = np.eye(3)
    t_sum = np.zeros(3)
    w_total = Rotation.identity()
    for m, s in zip(motions, speeds):
        t_sum += s * (r @ m.t_axis)
        rot = Rotation.from_rotvec(m.w)
        w_total = w_total * rot
        r = r @ rot.as_matrix()
    speed = float(np.linalg.norm(t_sum))
    axis = t_sum / speed if speed > 0 else np.array([0.0, 0.0, 1.0])
    return RigidMotion(t_axis=axis, w=w_total.as_rotvec()), speed


def save_raster(path, raster: np.ndarray) -> None:
    """Float32 raster with an 8-byte (u32 width, u32 height) header."""
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ValueError(f"raster must be 2-D, got {raster.shape}")
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(raster, dtype="<f4").tobytes())


def load_raster(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedFile(f"{path}: {len(raw)} bytes")
    w, h = struct.unpack("<II", raw[:8])
    need = 8 + 4 * w * h
    if len(raw) < need:
        raise TruncatedFile(f"{path}: need {need} bytes, have {len(raw)}")
    return np.frombuffer(raw[8:need], dtype="<f4").reshape(h, w).copy()


def structure_to_png(path, c_raster: np.ndarray) -> None:
    """Visualize scaled inverse depth: near (large c) dark, far light."""
    c = np.asarray(c_raster, dtype=float)
    lo, hi = float(np.nanmin(c)), float(np.nanmax(c))
    if hi - lo < 1e-30:
        gray = np.full(c.shape, 128, dtype=np.uint8)
    else:
        gray = (255.0 * (1.0 - (c - lo) / (hi - lo))).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path)
