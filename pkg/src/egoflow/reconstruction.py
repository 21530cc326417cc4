"""Scaled scene structure from normal flow, densification by second-order
smoothness inpainting, and least-squares motion refinement.

From an estimated motion, each measurement yields a scaled depth
C = (A t . n) / (u_n - B w . n) (depth over translation speed); we store its
inverse c = 1/C, the scaled inverse depth.  Inpainting densifies c under a
second-order smoothness prior (exact on affine surfaces), and the motion is
re-fit by linear least squares against the smoothed structure.  Alternating
the two steps refines both motion and structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import DegenerateSystem, InsufficientData
from .geometry import CameraIntrinsics, RigidMotion, normal_design_rows
from .normal_flow import NormalFlowField

DEFAULT_LAMBDA_DATA = 1e3
MIN_REFINE_POINTS = 20


@dataclass(frozen=True)
class SparseStructure:
    """Per-measurement scaled inverse depth c = |t|/Z with validity flags."""

    xs: np.ndarray
    ys: np.ndarray
    c: np.ndarray
    valid: np.ndarray
    width: int
    height: int

    def __len__(self) -> int:
        return len(self.xs)

    def n_valid(self) -> int:
        return int(np.sum(self.valid))

    def density(self) -> float:
        return self.n_valid() / float(self.width * self.height)

    def scaled_depth(self) -> np.ndarray:
        """C = Z/|t| where valid; NaN elsewhere."""
        out = np.full(len(self.c), np.nan)
        v = self.valid
        out[v] = 1.0 / self.c[v]
        return out


@dataclass(frozen=True)
class DenseStructure:
    """Per-pixel scaled inverse depth raster plus the data-constrained mask."""

    c: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.c.shape != self.mask.shape:
            raise ValueError("raster and mask shapes differ")

    @property
    def height(self) -> int:
        return self.c.shape[0]

    @property
    def width(self) -> int:
        return self.c.shape[1]


@dataclass(frozen=True)
class RefineConfig:
    max_outer_iters: int = 10
    depth_convergence_tol: float = 1e-2  # relative mean-abs change
    min_derotated_speed: float = 1e-2    # px/frame, guards the division
    lambda_data: float = DEFAULT_LAMBDA_DATA

    def __post_init__(self):
        if min(self.max_outer_iters, self.depth_convergence_tol,
               self.min_derotated_speed, self.lambda_data) <= 0:
            raise ValueError("all refine parameters must be positive")


@dataclass
class RefinementReport:
    """Per-iteration history of the refinement loop."""

    motions: list = field(default_factory=list)
    ls_residuals: list = field(default_factory=list)
    structure_changes: list = field(default_factory=list)
    mae: list = field(default_factory=list)
    pobp: list = field(default_factory=list)
    converged: bool = False
    used_iteration: int = -1


def structure_from_normal_flow(nf: NormalFlowField, motion: RigidMotion,
                               cam: CameraIntrinsics,
                               min_derotated_speed: float = 1e-2) -> SparseStructure:
    """Scaled inverse depth per measurement from an estimated motion.

    Entries with |u_n - B w . n| below min_derotated_speed or non-positive
    implied depth are flagged invalid, never dropped.
    """
    an, bn = normal_design_rows(nf.xs, nf.ys, nf.nx, nf.ny, cam)
    s = an @ motion.t_axis
    derot = nf.speeds - bn @ motion.w
    safe = np.abs(derot) >= min_derotated_speed
    c = np.zeros(len(nf))
    np.divide(derot, s, out=c, where=safe & (s != 0.0))
    valid = safe & (s != 0.0) & np.isfinite(c) & (c > 0.0)
    c[~valid] = 0.0
    return SparseStructure(xs=nf.xs.copy(), ys=nf.ys.copy(), c=c, valid=valid,
                           width=nf.width, height=nf.height)


def _second_difference_operator(h: int, w: int) -> sparse.csr_matrix:
    """Stacked horizontal, vertical and two diagonal second differences."""
    idx = np.arange(h * w).reshape(h, w)
    rows_list = []
    cols_list = []
    vals_list = []
    eq = 0

    def add(center, minus, plus):
        nonlocal eq
        n = center.size
        e = np.arange(eq, eq + n)
        rows_list.append(np.concatenate([e, e, e]))
        cols_list.append(np.concatenate([minus.ravel(), center.ravel(),
                                         plus.ravel()]))
        vals_list.append(np.concatenate([np.ones(n), -2.0 * np.ones(n),
                                         np.ones(n)]))
        eq += n

    add(idx[:, 1:-1], idx[:, :-2], idx[:, 2:])          # horizontal
    add(idx[1:-1, :], idx[:-2, :], idx[2:, :])          # vertical
    add(idx[1:-1, 1:-1], idx[:-2, :-2], idx[2:, 2:])    # main diagonal
    add(idx[1:-1, 1:-1], idx[:-2, 2:], idx[2:, :-2])    # anti diagonal
    return sparse.csr_matrix(
        (np.concatenate(vals_list),
         (np.concatenate(rows_list), np.concatenate(cols_list))),
        shape=(eq, h * w))


def smoothness_energy(raster: np.ndarray) -> float:
    """Sum of squared second differences (zero exactly on affine rasters)."""
    d = _second_difference_operator(*raster.shape)
    r = d @ raster.ravel()
    return float(r @ r)


def inpaint(struct: SparseStructure, cam: CameraIntrinsics | None = None,
            lambda_data: float = DEFAULT_LAMBDA_DATA) -> DenseStructure:
    """Densify sparse structure under squared second-difference smoothness.

    Minimizes |D x|^2 + lambda_data * sum_valid (x_p - c_p)^2 and solves the
    sparse SPD normal equations directly.  Affine surfaces are reproduced
    exactly (they are the null space of all four stencils).
    """
    h, w = struct.height, struct.width
    v = struct.valid
    if int(np.sum(v)) < 3:
        raise InsufficientData(f"{int(np.sum(v))} valid entries; need >= 3")
    px = struct.xs[v]
    py = struct.ys[v]
    spread = np.linalg.matrix_rank(
        np.column_stack([px - px.mean(), py - py.mean()]))
    if spread < 2:
        raise InsufficientData("valid entries are collinear")
    if cam is None:
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    else:
        cx, cy = cam.cx, cam.cy
    cols = np.rint(px + cx).astype(int)
    rows = np.rint(py + cy).astype(int)
    if (cols.min() < 0 or cols.max() >= w or rows.min() < 0 or rows.max() >= h):
        raise InsufficientData("valid entries outside the raster")

    d = _second_difference_operator(h, w)
    flat = rows * w + cols
    data_diag = np.zeros(h * w)
    rhs = np.zeros(h * w)
    # last write wins on duplicate pixels; positions are unique by contract
    data_diag[flat] = lambda_data
    rhs[flat] = lambda_data * struct.c[v]
    a = (d.T @ d + sparse.diags(data_diag)).tocsc()
    x = spsolve(a, rhs)
    mask = np.zeros((h, w), dtype=bool)
    mask[rows, cols] = True
    return DenseStructure(c=x.reshape(h, w), mask=mask)


def sample_dense_at(nf: NormalFlowField, dense: DenseStructure,
                    cam: CameraIntrinsics) -> np.ndarray:
    """Dense structure values at the measurement pixels."""
    cols = np.rint(nf.xs + cam.cx).astype(int)
    rows = np.rint(nf.ys + cam.cy).astype(int)
    return dense.c[np.clip(rows, 0, dense.height - 1),
                   np.clip(cols, 0, dense.width - 1)]


def refine_motion_ls(nf: NormalFlowField, c_values: np.ndarray,
                     cam: CameraIntrinsics,
                     valid: np.ndarray | None = None) -> tuple[RigidMotion, float]:
    """Closed-form least squares u_n = c (n.A t') + (n.B) w over (t', w).

    The translation enters scaled (t' = s * t with s >= 0 free); the axis is
    normalized afterwards.  Returns (motion, mean squared residual).
    """
    c_values = np.asarray(c_values, dtype=float)
    if valid is None:
        valid = np.isfinite(c_values)
    else:
        valid = np.asarray(valid, dtype=bool) & np.isfinite(c_values)
    n = int(np.sum(valid))
    if n < MIN_REFINE_POINTS:
        raise DegenerateSystem(f"{n} usable structure values; "
                               f"need >= {MIN_REFINE_POINTS}")
    an, bn = normal_design_rows(nf.xs[valid], nf.ys[valid], nf.nx[valid],
                                nf.ny[valid], cam)
    x = np.column_stack([c_values[valid][:, None] * an, bn])
    y = nf.speeds[valid]
    m = x.T @ x
    if np.linalg.cond(m) > 1e14:
        raise DegenerateSystem("rank-deficient refinement system")
    sol = np.linalg.solve(m, x.T @ y)
    tau, w = sol[:3], sol[3:]
    norm = np.linalg.norm(tau)
    if norm < 1e-12:
        raise DegenerateSystem("zero translation solution")
    r = y - x @ sol
    return RigidMotion(t_axis=tau / norm, w=w), float(np.mean(r * r))


def refine_loop(nf: NormalFlowField, init: RigidMotion, cam: CameraIntrinsics,
                config: RefineConfig = RefineConfig(),
                truth_c_raster: np.ndarray | None = None,
                pobp_threshold: float = 1.0):
    """Alternate structure extraction, inpainting and motion re-estimation.

    Stops at max_outer_iters or when the relative mean-abs change between
    consecutive dense structures drops below depth_convergence_tol.  Returns
    (motion, dense structure, report); the reported motion is the iterate
    with the smallest least-squares fit residual.
    """
    motion = init
    prev_dense = None
    report = RefinementReport()
    best = None  # (residual, motion, dense)
    for _ in range(config.max_outer_iters):
        struct = structure_from_normal_flow(nf, motion, cam,
                                            config.min_derotated_speed)
        dense = inpaint(struct, cam, config.lambda_data)
        c_at = sample_dense_at(nf, dense, cam)
        motion, resid = refine_motion_ls(nf, c_at, cam)
        report.motions.append(motion)
        report.ls_residuals.append(resid)
        if truth_c_raster is not None:
            err = np.abs(dense.c - truth_c_raster)
            report.mae.append(float(err.mean()))
            report.pobp.append(float(np.mean(err > pobp_threshold)))
        if best is None or resid < best[0]:
            best = (resid, motion, dense)
        if prev_dense is not None:
            denom = max(float(np.mean(np.abs(prev_dense.c))), 1e-30)
            change = float(np.mean(np.abs(dense.c - prev_dense.c))) / denom
            report.structure_changes.append(change)
            if change < config.depth_convergence_tol:
                report.converged = True
                prev_dense = dense
                break
        prev_dense = dense
    _, best_motion, best_dense = best
    report.used_iteration = report.ls_residuals.index(best[0])
    return best_motion, best_dense, report
