"""Baseline residuals and solvers for the classic egomotion constraints:
squared distance, (unbiased) epipolar, planar patches, positive-depth and
sign-only voting, and the orthogonal-flow rotation solve.

These exist for comparison against the depth-positivity solver and for
rendering residual surfaces over the translation sphere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateSystem, NonPositiveDepth, PatchUnderdetermined,
                     TooFewMeasurements)
from .geometry import (CameraIntrinsics, RigidMotion, apply_rotation,
                       apply_translation, normal_design_rows, sphere_grid)
from .normal_flow import NormalFlowField

_BLOCK = 4096          # candidate block size for batched grid scans
_SPEED_FLOOR = 1e-9    # |A t| below this is skipped in the unbiased residual


@dataclass(frozen=True)
class ResidualSurface:
    """Residual over a grid of candidate translation axes.

    One row per candidate: the axis, the residual after solving the inner
    (rotation / structure) variables, and that best rotation.
    """

    directions: np.ndarray   # (J, 3)
    residuals: np.ndarray    # (J,)
    rotations: np.ndarray    # (J, 3)

    @property
    def argmin_index(self) -> int:
        return int(np.argmin(self.residuals))

    def to_csv(self, path) -> None:
        lines = ["tx,ty,tz,residual,wx,wy,wz"]
        for j in range(len(self.residuals)):
            d = self.directions[j]
            w = self.rotations[j]
            lines.append(",".join(repr(float(v)) for v in
                                  (d[0], d[1], d[2], self.residuals[j],
                                   w[0], w[1], w[2])))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class PlanarPatch:
    """One rectangular patch and its scaled plane vector."""

    patch_id: int
    col_range: tuple[float, float]
    row_range: tuple[float, float]
    v: np.ndarray  # scaled plane vector |t| * (alpha, beta, gamma)

    def inverse_depth(self, x, y, f) -> np.ndarray:
        """Scaled inverse depth |t|/Z at centered coordinates on this plane."""
        return (self.v[0] * np.asarray(x) / f + self.v[1] * np.asarray(y) / f
                + self.v[2])


def _rotation_rows(xs, ys, cam: CameraIntrinsics):
    """Rows of B(p) per point: BX = B[0, :], BY = B[1, :], each (N, 3)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    f = cam.focal_length
    bx = np.stack([xs * ys / f, -(xs * xs) / f - f, ys], axis=-1)
    by = np.stack([(ys * ys) / f + f, -xs * ys / f, -xs], axis=-1)
    return bx, by


def epipolar_residual(positions, flows, motion: RigidMotion,
                      cam: CameraIntrinsics, unbiased: bool = False) -> float:
    """Sum of |derotated flow . perp(A t)| over the flow set.

    The unbiased variant normalizes perp(A t) to unit length per point;
    points where |A t| < 1e-9 are skipped there.
    """
    positions = np.asarray(positions, dtype=float)
    flows = np.asarray(flows, dtype=float)
    if len(positions) < 5:
        raise TooFewMeasurements(f"need >= 5 flow vectors, got {len(positions)}")
    xs, ys = positions[:, 0], positions[:, 1]
    at = apply_translation(xs, ys, motion.t_axis, cam)
    bw = apply_rotation(xs, ys, motion.w, cam)
    e = flows - bw
    cross = e[:, 0] * (-at[:, 1]) + e[:, 1] * at[:, 0]
    if unbiased:
        norms = np.hypot(at[:, 0], at[:, 1])
        keep = norms >= _SPEED_FLOOR
        return float(np.sum(np.abs(cross[keep]) / norms[keep]))
    return float(np.sum(np.abs(cross)))


def solve_epipolar(positions, flows, cam: CameraIntrinsics, grid_level: int = 2,
                   unbiased: bool = True):
    """Grid search over translation axes with a closed-form rotation per axis.

    For fixed t the squared epipolar residual is linear-in-w least squares;
    the recorded surface residual is the absolute-value form at that w.

    Returns (motion, surface, degenerate_translation_flag).
    """
    positions = np.asarray(positions, dtype=float)
    flows = np.asarray(flows, dtype=float)
    n = len(positions)
    if n < 5:
        raise TooFewMeasurements(f"need >= 5 flow vectors, got {n}")
    xs, ys = positions[:, 0], positions[:, 1]
    bx, by = _rotation_rows(xs, ys, cam)
    f = cam.focal_length
    grid = sphere_grid(grid_level)
    jn = len(grid)
    residuals = np.empty(jn)
    rotations = np.empty((jn, 3))
    any_ok = False
    for start in range(0, jn, _BLOCK):
        t_blk = grid[start:start + _BLOCK]
        atx = -f * t_blk[:, 0][None, :] + xs[:, None] * t_blk[:, 2][None, :]
        aty = -f * t_blk[:, 1][None, :] + ys[:, None] * t_blk[:, 2][None, :]
        dpx, dpy = -aty, atx
        if unbiased:
            norms = np.hypot(dpx, dpy)
            good = norms >= _SPEED_FLOOR
            scale = np.where(good, 1.0 / np.where(good, norms, 1.0), 0.0)
            dpx = dpx * scale
            dpy = dpy * scale
        # rows r = B^T d_perp, target y = u . d_perp
        r = bx[:, None, :] * dpx[:, :, None] + by[:, None, :] * dpy[:, :, None]
        y = flows[:, 0][:, None] * dpx + flows[:, 1][:, None] * dpy
        m = np.einsum("njk,njl->jkl", r, r)
        rhs = np.einsum("njk,nj->jk", r, y)
        tr = np.trace(m, axis1=1, axis2=2)
        det = np.linalg.det(m)
        ok = det > (1e-12 * np.maximum(tr, 1e-300) / 3.0) ** 3
        any_ok |= bool(ok.any())
        m_reg = m + (1e-12 * np.maximum(tr, 1e-300) / 3.0)[:, None, None] * np.eye(3)
        w_blk = np.linalg.solve(m_reg, rhs)
        w_blk[~ok] = 0.0
        e = y - np.einsum("njk,jk->nj", r, w_blk)
        residuals[start:start + len(t_blk)] = np.sum(np.abs(e), axis=0)
        rotations[start:start + len(t_blk)] = w_blk
    if not any_ok:
        raise DegenerateSystem("rank-deficient rotation normal equations at "
                               "every candidate translation")
    j = int(np.argmin(residuals))
    lo, hi = float(residuals.min()), float(residuals.max())
    flat = (hi - lo) <= 1e-9 * max(1.0, hi)
    motion = RigidMotion(t_axis=grid[j], w=rotations[j])
    return motion, ResidualSurface(grid, residuals, rotations), flat


@dataclass(frozen=True)
class PatchLayout:
    """Regular rectangular partition of the image (default 8x8)."""

    rows: int = 8
    cols: int = 8

    def assign(self, nf: NormalFlowField, cam: CameraIntrinsics) -> np.ndarray:
        """Patch index per measurement."""
        col = np.clip(((nf.xs + cam.cx) * self.cols / nf.width).astype(int),
                      0, self.cols - 1)
        row = np.clip(((nf.ys + cam.cy) * self.rows / nf.height).astype(int),
                      0, self.rows - 1)
        return row * self.cols + col


def solve_planar_patches(nf: NormalFlowField, cam: CameraIntrinsics,
                         layout: PatchLayout = PatchLayout(),
                         grid_level: int = 1, min_patch_points: int = 6,
                         max_inner_iters: int = 50, inner_tol: float = 1e-10):
    """Piecewise-planar grid search: per candidate axis, alternate exact
    least squares in the plane vectors and the rotation.

    Returns (motion, patches, surface, dropped_patch_ids).
    """
    n = len(nf)
    layout_patches = layout.rows * layout.cols
    pidx_all = layout.assign(nf, cam)
    counts = np.bincount(pidx_all, minlength=layout_patches)
    kept_ids = np.nonzero(counts >= min_patch_points)[0]
    dropped = [int(i) for i in np.nonzero((counts > 0) & (counts < min_patch_points))[0]]
    if len(kept_ids) == 0:
        raise PatchUnderdetermined("every patch has fewer than "
                                   f"{min_patch_points} measurements")
    keep = np.isin(pidx_all, kept_ids)
    sub = np.nonzero(keep)[0]
    p_count = len(kept_ids)
    if len(sub) < 3 * p_count + 5:
        raise TooFewMeasurements(
            f"{len(sub)} measurements for {p_count} patches; "
            f"need >= {3 * p_count + 5}")
    remap = {int(g): k for k, g in enumerate(kept_ids)}
    pidx = np.array([remap[int(g)] for g in pidx_all[sub]])
    xs, ys = nf.xs[sub], nf.ys[sub]
    un = nf.speeds[sub]
    an, bn = normal_design_rows(xs, ys, nf.nx[sub], nf.ny[sub], cam)
    f = cam.focal_length
    phi = np.stack([xs / f, ys / f, np.ones_like(xs)], axis=-1)
    phi2 = phi[:, :, None] * phi[:, None, :]
    members = [np.nonzero(pidx == k)[0] for k in range(p_count)]

    # rotation normal matrix is candidate independent
    m_w = bn.T @ bn
    m_w += 1e-12 * np.trace(m_w) / 3.0 * np.eye(3)

    grid = sphere_grid(grid_level)
    jn = len(grid)
    residuals = np.full(jn, np.inf)
    rotations = np.zeros((jn, 3))
    best_v = None
    best_j = -1
    for start in range(0, jn, _BLOCK):
        t_blk = grid[start:start + _BLOCK]
        jb = len(t_blk)
        s = an @ t_blk.T                       # (N, Jb)
        w = np.zeros((jb, 3))
        v = np.zeros((jb, p_count, 3))
        gam = np.zeros_like(s)
        prev_res = np.full(jb, np.inf)
        res = prev_res
        for _ in range(max_inner_iters):
            r = un[:, None] - bn @ w.T         # (N, Jb)
            s2 = s * s
            sr = s * r
            for k, mem in enumerate(members):
                m_p = np.einsum("nj,nab->jab", s2[mem], phi2[mem])
                m_p += (1e-12 * np.trace(m_p, axis1=1, axis2=2) / 3.0 +
                        1e-300)[:, None, None] * np.eye(3)
                rhs = np.einsum("nj,na->ja", sr[mem], phi[mem])
                v[:, k, :] = np.linalg.solve(m_p, rhs)
                gam[mem] = np.einsum("na,ja->nj", phi[mem], v[:, k, :])
            y = un[:, None] - s * gam
            w = np.linalg.solve(m_w, bn.T @ y).T
            e = y - bn @ w.T
            res = np.sum(e * e, axis=0)
            if np.all(np.abs(prev_res - res) < inner_tol):
                break
            prev_res = res
        residuals[start:start + jb] = res
        rotations[start:start + jb] = w
        jloc = int(np.argmin(res))
        if best_j < 0 or res[jloc] < residuals[best_j]:
            best_j = start + jloc
            best_v = v[jloc].copy()
    j = int(np.argmin(residuals))
    t_best = grid[j].copy()
    v_best = best_v
    # orient the sign so the recovered inverse depths are mostly in front
    gam_best = np.einsum("na,na->n", phi, v_best[pidx])
    if np.mean(gam_best) < 0:
        t_best = -t_best
        v_best = -v_best
    patch_w = nf.width / layout.cols
    patch_h = nf.height / layout.rows
    patches = []
    for k, gid in enumerate(kept_ids):
        pr, pc = divmod(int(gid), layout.cols)
        patches.append(PlanarPatch(
            patch_id=int(gid),
            col_range=(pc * patch_w, (pc + 1) * patch_w),
            row_range=(pr * patch_h, (pr + 1) * patch_h),
            v=v_best[k]))
    motion = RigidMotion(t_axis=t_best, w=rotations[j])
    return motion, patches, ResidualSurface(grid, residuals, rotations), dropped


def planar_alternation_history(nf: NormalFlowField, cam: CameraIntrinsics,
                               t_axis, layout: PatchLayout = PatchLayout(),
                               iters: int = 20):
    """Residual per inner alternation step for a single candidate axis."""
    pidx = layout.assign(nf, cam)
    an, bn = normal_design_rows(nf.xs, nf.ys, nf.nx, nf.ny, cam)
    f = cam.focal_length
    phi = np.stack([nf.xs / f, nf.ys / f, np.ones_like(nf.xs)], axis=-1)
    s = an @ np.asarray(t_axis, dtype=float)
    un = nf.speeds
    m_w = bn.T @ bn + 1e-12 * np.trace(bn.T @ bn) / 3.0 * np.eye(3)
    w = np.zeros(3)
    gam = np.zeros_like(s)
    hist = []
    for _ in range(iters):
        r = un - bn @ w
        for k in np.unique(pidx):
            mem = pidx == k
            a = s[mem, None] * phi[mem]
            vk, *_ = np.linalg.lstsq(a, r[mem], rcond=None)
            gam[mem] = phi[mem] @ vk
        y = un - s * gam
        w = np.linalg.solve(m_w, bn.T @ y)
        e = y - bn @ w
        hist.append(float(e @ e))
    return np.array(hist)


def depth_positivity_votes(nf: NormalFlowField, motion: RigidMotion,
                           cam: CameraIntrinsics) -> int:
    """Number of measurements whose implied depth is negative (strict)."""
    an, bn = normal_design_rows(nf.xs, nf.ys, nf.nx, nf.ny, cam)
    f = (nf.speeds - bn @ motion.w) * (an @ motion.t_axis)
    return int(np.sum(f < 0.0))


def robust_sign_votes(nf: NormalFlowField, motion: RigidMotion,
                      cam: CameraIntrinsics) -> int:
    """Sign-only violation count: patterns incompatible with positive depth."""
    an, bn = normal_design_rows(nf.xs, nf.ys, nf.nx, nf.ny, cam)
    rot = bn @ motion.w
    trans = an @ motion.t_axis
    un = nf.speeds
    first = (un > 0) & (rot < 0) & (trans < 0)
    second = (un < 0) & (rot > 0) & (trans > 0)
    return int(np.sum(first | second))


def orthogonal_flow_rotation(nf: NormalFlowField, t_axis,
                             cam: CameraIntrinsics, ortho_tol: float = 0.05):
    """Rotation from measurements nearly orthogonal to the translation flow.

    Selects entries with |n . A t| <= ortho_tol * |A t| and solves the linear
    least squares u_n = (n . B) w over them.  Returns (w, count).
    """
    if not ortho_tol > 0:
        raise ValueError(f"ortho_tol must be > 0, got {ortho_tol}")
    t_axis = np.asarray(t_axis, dtype=float)
    an, bn = normal_design_rows(nf.xs, nf.ys, nf.nx, nf.ny, cam)
    s = an @ t_axis
    at = apply_translation(nf.xs, nf.ys, t_axis, cam)
    norms = np.hypot(at[:, 0], at[:, 1])
    sel = np.abs(s) <= ortho_tol * norms
    m = int(np.sum(sel))
    if m < 3:
        raise TooFewMeasurements(
            f"only {m} near-orthogonal measurements (need >= 3)")
    a = bn[sel]
    w, *_ = np.linalg.lstsq(a, nf.speeds[sel], rcond=None)
    return w, m


def squared_distance_residual(positions, flows, motion: RigidMotion, depths,
                              cam: CameraIntrinsics, speed: float = 1.0) -> float:
    """Sum of flow reprojection error norms with known per-point depth."""
    positions = np.asarray(positions, dtype=float)
    flows = np.asarray(flows, dtype=float)
    depths = np.asarray(depths, dtype=float)
    if np.any(depths <= 0):
        raise NonPositiveDepth("all depths must be > 0")
    xs, ys = positions[:, 0], positions[:, 1]
    at = apply_translation(xs, ys, motion.t_axis, cam)
    bw = apply_rotation(xs, ys, motion.w, cam)
    model = (speed / depths)[:, None] * at + bw
    return float(np.sum(np.linalg.norm(flows - model, axis=1)))


def solve_sign_voting(nf: NormalFlowField, cam: CameraIntrinsics,
                      grid_level: int = 1, ortho_tol: float = 0.05):
    """Two-step sign-voting baseline.

    For each candidate axis the rotation comes from the orthogonal-flow
    least squares; candidates are ranked by the sign-only violation count
    (both signs of the axis tried).  Returns (motion, surface).
    """
    an, bn = normal_design_rows(nf.xs, nf.ys, nf.nx, nf.ny, cam)
    at_sq_x, at_sq_y = None, None
    grid = sphere_grid(grid_level)
    jn = len(grid)
    votes = np.full(jn, np.inf)
    rotations = np.zeros((jn, 3))
    signs = np.ones(jn)
    un = nf.speeds
    f = cam.focal_length
    xs, ys = nf.xs, nf.ys
    for start in range(0, jn, _BLOCK):
        t_blk = grid[start:start + _BLOCK]
        s = an @ t_blk.T                                   # (N, Jb)
        atx = -f * t_blk[:, 0][None, :] + xs[:, None] * t_blk[:, 2][None, :]
        aty = -f * t_blk[:, 1][None, :] + ys[:, None] * t_blk[:, 2][None, :]
        norms = np.hypot(atx, aty)
        sel = np.abs(s) <= ortho_tol * norms
        for jb in range(len(t_blk)):
            mask = sel[:, jb]
            if int(mask.sum()) < 3:
                continue
            w, *_ = np.linalg.lstsq(bn[mask], un[mask], rcond=None)
            rot = bn @ w
            sj = s[:, jb]
            best = np.inf
            best_sign = 1.0
            for sign in (1.0, -1.0):
                trans = sign * sj
                v = int(np.sum(((un > 0) & (rot < 0) & (trans < 0)) |
                               ((un < 0) & (rot > 0) & (trans > 0))))
                if v < best:
                    best = v
                    best_sign = sign
            votes[start + jb] = best
            rotations[start + jb] = w
            signs[start + jb] = best_sign
    if not np.isfinite(votes).any():
        raise TooFewMeasurements("no candidate had enough near-orthogonal "
                                 "measurements")
    j = int(np.argmin(votes))
    motion = RigidMotion(t_axis=signs[j] * grid[j], w=rotations[j])
    return motion, ResidualSurface(grid, votes, rotations)
