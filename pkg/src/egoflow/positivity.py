"""Depth-positivity egomotion solver.

For a measurement with direction n at point p, positive depth forces the
derotated normal speed and the translational normal component to share sign:

    f(t, w, p) = (u_n - n.B(p) w) * (n.A(p) t) > 0.

The solver minimizes the hinged violation sum(H(f_i)) with H the negative
ReLU, searching candidate translation axes on a sphere lattice and solving
the rotation per candidate by descent on an epsilon-smoothed version of the
objective (see _kernels).  Within the argmin set, which this objective does
not fully determine, the rotation is centred by a gated weighted refit and
the axis by a zero-violation tie break.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .constraints import ResidualSurface
from .errors import DegenerateField, EmptyField, TooFewMeasurements
from .geometry import RigidMotion, cap_grid, normal_design_rows, sphere_grid
from .normal_flow import NormalFlowField

MIN_FIELD_SIZE = 20
_POLISH_RANK = 10        # k-th smallest |n.At| sets the refit weight scale
_FINAL_ITER_SCALE = 10   # extra iteration budget for the last rotation solve
_COARSE_ITER_CAP = 30    # ranking the coarse grid needs no exact solves
_FINE_ITER_CAP = 20
_JOINT_STARTS = 3        # joint refinement starts (scan picks >= 1 deg apart)
_RECENTER_RADIUS_DEG = 3.0  # fine-cap radius after the first outer round


@dataclass(frozen=True)
class SolverConfig:
    """Tuning for estimate_motion.

    epsilon: smoothing half-width of the hinge gradient, in the units of
        f(t, w, p); None picks a scale-aware default from the field.
    grid_level_coarse/fine: sphere lattice levels (worst candidate spacing
        is 4 deg / 2**level).
    max_rotation: ball bound |w| <= max_rotation (rad/frame) for every
        rotation solve; unbounded rotations can fake positive depth at any
        axis by mimicking translational flow, so a physical cap is required.
    warm_start: initialize fine-stage rotation solves from the coarse best
        rotation instead of zero.
    full_grid: replace the fine cap search by a full-sphere scan at the fine
        level (the exhaustive oracle mode).
    scan_subsample: grid scans use at most this many measurements (a strided
        subsample); all refinement and every reported value use the full
        field.
    joint_refine: run the joint axis+rotation descent on the full field
        after the fine scan (gated on the hinge objective).
    """

    epsilon: float | None = None
    grid_level_coarse: int = 0
    grid_level_fine: int = 4
    rotation_max_iters: int = 60
    rotation_step_tol: float = 1e-9
    max_rotation: float = 1.0
    outer_rounds: int = 1
    scan_subsample: int = 2304
    joint_refine: bool = True
    joint_max_iters: int = 400
    joint_eps_stages: int = 3
    armijo: float = 1e-4
    warm_start: bool = True
    full_grid: bool = False
    keep_surface: bool = False
    polish: bool = True

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.grid_level_fine < self.grid_level_coarse:
            raise ValueError("grid_level_fine must be >= grid_level_coarse")
        if min(self.rotation_max_iters, self.outer_rounds) < 1:
            raise ValueError("iteration caps must be >= 1")


@dataclass(frozen=True)
class MotionEstimate:
    """Solver output: motion, hinge objective, and negative-depth votes."""

    motion: RigidMotion
    objective: float
    negative_depth_count: int
    surface: ResidualSurface | None = None
    scan_objective_min: float = np.nan  # best objective seen on the fine scan


def hinge(x):
    """Negative ReLU: -x for x <= 0, else 0."""
    x = np.asarray(x, dtype=float)
    out = np.where(x <= 0, -x, 0.0)
    return float(out) if out.ndim == 0 else out


def hinge_grad(x, epsilon: float):
    """Three-piece hinge slope: -1 below -eps, -1/2 inside the band, 0 above."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    x = np.asarray(x, dtype=float)
    out = np.where(x <= -epsilon, -1.0, np.where(x < epsilon, -0.5, 0.0))
    return float(out) if out.ndim == 0 else out


def _design(nf: NormalFlowField, cam):
    an, bn = normal_design_rows(nf.xs, nf.ys, nf.nx, nf.ny, cam)
    return an, bn, np.ascontiguousarray(nf.speeds, dtype=float)


def positivity_terms(nf: NormalFlowField, motion: RigidMotion, cam) -> np.ndarray:
    """f(t, w, p) for every measurement."""
    an, bn, un = _design(nf, cam)
    return (un - bn @ motion.w) * (an @ motion.t_axis)


def positivity_term(nf: NormalFlowField, index: int, motion: RigidMotion,
                    cam) -> float:
    """f(t, w, p) of a single measurement."""
    an, bn, un = _design(nf, cam)
    return float((un[index] - bn[index] @ motion.w) *
                 (an[index] @ motion.t_axis))


def objective(nf: NormalFlowField, motion: RigidMotion, cam) -> float:
    """Total hinged positivity violation sum_i H(f_i)."""
    if len(nf) == 0:
        raise EmptyField("objective of an empty field")
    return float(np.sum(hinge(positivity_terms(nf, motion, cam))))


def objective_gradient_w(nf: NormalFlowField, motion: RigidMotion, cam,
                         epsilon: float) -> np.ndarray:
    """Gradient of the objective in w: sum_i H'(f_i) (n.A t) (-B^T n)."""
    if len(nf) == 0:
        raise EmptyField("gradient of an empty field")
    an, bn, un = _design(nf, cam)
    s = an @ motion.t_axis
    f = (un - bn @ motion.w) * s
    hp = hinge_grad(f, epsilon)
    return -((hp * s) @ bn)


def default_epsilon(nf: NormalFlowField, cam) -> float:
    """Scale-aware smoothing width: 1e-3 * median |u_n| * median |A^T n|."""
    an, _, un = _design(nf, cam)
    eps = 1e-3 * float(np.median(np.abs(un))) * float(
        np.median(np.linalg.norm(an, axis=1)))
    return max(eps, 1e-12)


def negative_depth_votes(nf: NormalFlowField, motion: RigidMotion, cam) -> int:
    """Strict count of measurements with f < 0."""
    return int(np.sum(positivity_terms(nf, motion, cam) < 0.0))


def _split(arr):
    return (np.ascontiguousarray(arr[:, 0]), np.ascontiguousarray(arr[:, 1]),
            np.ascontiguousarray(arr[:, 2]))


def _scan(an, bn, un, cands, w_inits, eps, cfg: SolverConfig,
          max_iters=None, sign_normalized=False):
    a0, a1, a2 = _split(an)
    b0, b1, b2 = _split(bn)
    jn = len(cands)
    out_w = np.empty((jn, 3))
    out_sobj = np.empty(jn)
    out_tobj = np.empty(jn)
    out_iters = np.empty(jn, dtype=np.int64)
    _kernels.rotation_scan(
        a0, a1, a2, b0, b1, b2, un, np.ascontiguousarray(cands),
        np.ascontiguousarray(w_inits), eps, cfg.max_rotation,
        max_iters or cfg.rotation_max_iters, cfg.rotation_step_tol,
        cfg.armijo, sign_normalized, out_w, out_sobj, out_tobj, out_iters)
    return out_w, out_sobj, out_tobj


def _objective_scan(an, bn, un, cands, w):
    a0, a1, a2 = _split(an)
    b0, b1, b2 = _split(bn)
    out = np.empty(len(cands))
    _kernels.objective_scan(a0, a1, a2, b0, b1, b2, un,
                            np.ascontiguousarray(cands),
                            w[0], w[1], w[2], out)
    return out


def _true_objective(an, bn, un, t, w):
    f = (un - bn @ w) * (an @ t)
    return float(-np.sum(f[f < 0.0]))


def _select(objs, cands) -> int:
    """Argmin with a centred tie break over exact zero-objective candidates."""
    j = int(np.argmin(objs))
    if objs[j] != 0.0:
        return j
    tied = np.nonzero(objs == 0.0)[0]
    if len(tied) == 1:
        return j
    centroid = cands[tied].mean(axis=0)
    norm = np.linalg.norm(centroid)
    if norm < 1e-12:
        return j
    return int(tied[np.argmax(cands[tied] @ (centroid / norm))])


def _gls_rotation(an, bn, un, t, wmax):
    """Weighted refit of w: least squares of u_n = c*(n.At) + (n.B) w.

    Weights 1/(s^2 + lam) emphasize measurements nearly orthogonal to the
    candidate translation, which carry the rotation information; the global
    scale column absorbs the mean inverse depth.  Returns None on failure
    or when the result leaves the rotation ball.
    """
    s = an @ t
    n = len(s)
    if n <= _POLISH_RANK + 2:
        return None
    lam = float(np.partition(np.abs(s), _POLISH_RANK)[_POLISH_RANK]) ** 2
    wt = 1.0 / (s * s + max(lam, 1e-30))
    x = np.column_stack([s, bn])
    m = x.T @ (x * wt[:, None])
    m += 1e-12 * np.trace(m) / 4.0 * np.eye(4)
    try:
        sol = np.linalg.solve(m, x.T @ (wt * un))
    except np.linalg.LinAlgError:
        return None
    w_new = sol[1:4]
    if np.linalg.norm(w_new) > wmax:
        return None
    return w_new


def _polish_rotation(an, bn, un, t, w_cur, tobj_cur, wmax):
    """Weighted rotation refit, kept only if the hinge objective says so."""
    w_new = _gls_rotation(an, bn, un, t, wmax)
    if w_new is None:
        return w_cur, tobj_cur
    tobj_new = _true_objective(an, bn, un, t, w_new)
    if tobj_new <= tobj_cur:
        return w_new, tobj_new
    return w_cur, tobj_cur


def solve_rotation(nf: NormalFlowField, t_axis, cam,
                   config: SolverConfig | None = None, w_init=None,
                   return_history: bool = False):
    """Rotation minimizing the smoothed positivity objective at a fixed axis.

    Descent with Armijo backtracking (halving); terminates when the step
    norm drops below rotation_step_tol or at rotation_max_iters.  The hinge
    objective at the returned w never exceeds its value at w_init.
    """
    config = config or SolverConfig()
    an, bn, un = _design(nf, cam)
    eps = config.epsilon if config.epsilon is not None else default_epsilon(nf, cam)
    t = np.ascontiguousarray(t_axis, dtype=float)
    w0 = np.zeros(3) if w_init is None else np.asarray(w_init, dtype=float)
    hist = np.full(config.rotation_max_iters + 1, np.nan)
    a0, a1, a2 = _split(an)
    b0, b1, b2 = _split(bn)
    r0, r1, r2, sobj, tobj, iters = _kernels.rotation_descent_single(
        a0, a1, a2, b0, b1, b2, un, t, np.ascontiguousarray(w0), eps,
        config.max_rotation, config.rotation_max_iters,
        config.rotation_step_tol, config.armijo, hist)
    w = np.array([r0, r1, r2])
    if return_history:
        return w, hist[:iters + 1]
    return w


def _joint_refine(an, bn, un, t, w, eps, cfg: SolverConfig):
    """Joint axis+rotation descent with a shrinking smoothing band."""
    a0, a1, a2 = _split(an)
    b0, b1, b2 = _split(bn)
    t = np.ascontiguousarray(t, dtype=float)
    w = np.ascontiguousarray(w, dtype=float)
    e = eps
    for _ in range(cfg.joint_eps_stages):
        t, w, _, _, _ = _kernels.joint_refine(
            a0, a1, a2, b0, b1, b2, un, t, w, e, cfg.max_rotation,
            cfg.joint_max_iters, 1e-13, cfg.armijo)
        e /= 16.0
    return t, w


def estimate_motion(nf: NormalFlowField, cam,
                    config: SolverConfig | None = None) -> MotionEstimate:
    """Full egomotion estimate from a normal-flow field.

    Coarse signed scan over the translation sphere, a cap-restricted fine
    scan (warm started, on a strided scan subsample for large fields), a
    gated full-field joint refinement, an axis re-scan at the best rotation,
    and a negative-depth-vote sign resolution, repeated outer_rounds times.
    Deterministic for any thread count.
    """
    cfg = config or SolverConfig()
    if len(nf) < MIN_FIELD_SIZE:
        raise TooFewMeasurements(
            f"{len(nf)} measurements; need >= {MIN_FIELD_SIZE}")
    an, bn, un = _design(nf, cam)
    if float(np.max(np.abs(an))) < 1e-12:
        raise DegenerateField("all measurements orthogonal to every candidate")
    eps = cfg.epsilon if cfg.epsilon is not None else default_epsilon(nf, cam)

    if len(nf) > cfg.scan_subsample:
        stride = -(-len(nf) // cfg.scan_subsample)  # ceil
        sub = np.arange(0, len(nf), stride)
        an_s = np.ascontiguousarray(an[sub])
        bn_s = np.ascontiguousarray(bn[sub])
        un_s = np.ascontiguousarray(un[sub])
        subsampled = True
    else:
        an_s, bn_s, un_s = an, bn, un
        subsampled = False

    # Coarse stage ranks by the sign-normalized hinge (robust against
    # rotations faking positive depth via large cancelling terms); all
    # recorded objectives stay in plain hinge units.
    eps_rank = max(1e-3 * float(np.median(np.abs(un_s))), 1e-12)
    hemi = sphere_grid(cfg.grid_level_coarse)
    cands = np.vstack([hemi, -hemi])
    w_c, sobj_c, _ = _scan(an_s, bn_s, un_s, cands, np.zeros_like(cands),
                           eps_rank, cfg, sign_normalized=True,
                           max_iters=min(cfg.rotation_max_iters,
                                         _COARSE_ITER_CAP))
    j0 = int(np.argmin(sobj_c))
    best_t = cands[j0].copy()
    best_w = w_c[j0].copy()
    best_tobj = _true_objective(an, bn, un, best_t, best_w)

    surface = None
    if cfg.keep_surface:
        half = len(hemi)
        full_obj = np.empty(len(cands))
        _kernels.objective_scan_per_w(*_split(an), *_split(bn), un,
                                      np.ascontiguousarray(cands),
                                      np.ascontiguousarray(w_c), full_obj)
        folded = np.minimum(full_obj[:half], full_obj[half:])
        pick = np.where(full_obj[:half] <= full_obj[half:], np.arange(half),
                        np.arange(half) + half)
        surface = ResidualSurface(hemi.copy(), folded, w_c[pick].copy())

    cap_radius_deg = 2.0 * (4.0 / 2 ** cfg.grid_level_coarse)
    eps_s = (cfg.epsilon if cfg.epsilon is not None else
             max(1e-3 * float(np.median(np.abs(un_s))) *
                 float(np.median(np.linalg.norm(an_s, axis=1))), 1e-12))
    scan_min = np.nan
    for round_idx in range(cfg.outer_rounds):
        if cfg.full_grid:
            fine_hemi = sphere_grid(cfg.grid_level_fine)
            fine = np.vstack([fine_hemi, -fine_hemi])
        else:
            radius = cap_radius_deg if round_idx == 0 else _RECENTER_RADIUS_DEG
            fine = cap_grid(cfg.grid_level_fine, best_t, radius)
        if cfg.warm_start:
            w_inits = np.tile(best_w, (len(fine), 1))
        else:
            w_inits = np.zeros((len(fine), 3))
        w_f, _, tobj_f = _scan(an_s, bn_s, un_s, fine, w_inits, eps_s, cfg,
                               max_iters=min(cfg.rotation_max_iters,
                                             _FINE_ITER_CAP))
        if not subsampled:
            scan_min = float(tobj_f.min())
        jf = _select(tobj_f, fine)
        cand_t = fine[jf].copy()
        cand_w = w_f[jf].copy()
        cand_tobj = _true_objective(an, bn, un, cand_t, cand_w)
        if cand_tobj <= best_tobj:
            best_t, best_w, best_tobj = cand_t, cand_w, cand_tobj

        if cfg.joint_refine:
            # full-field joint refinement from a few spread scan picks,
            # gated as a block on the full-field hinge objective
            order = np.argsort(tobj_f, kind="stable")
            starts = [jf]
            for j in order:
                if len(starts) >= _JOINT_STARTS:
                    break
                j = int(j)
                if all(fine[j] @ fine[k] < np.cos(np.radians(1.0))
                       for k in starts):
                    starts.append(j)
            for js in starts:
                blk_t, blk_w = fine[js].copy(), w_f[js].copy()
                seed_tobj = _true_objective(an, bn, un, blk_t, blk_w)
                w_seed = _gls_rotation(an, bn, un, blk_t, cfg.max_rotation)
                if w_seed is not None and (_true_objective(an, bn, un, blk_t,
                                                           w_seed) < seed_tobj):
                    blk_w = w_seed
                blk_t, blk_w = _joint_refine(an, bn, un, blk_t, blk_w, eps, cfg)
                blk_tobj = _true_objective(an, bn, un, blk_t, blk_w)
                if cfg.polish:
                    blk_w, blk_tobj = _polish_rotation(an, bn, un, blk_t,
                                                       blk_w, blk_tobj,
                                                       cfg.max_rotation)
                if blk_tobj <= best_tobj:
                    best_t, best_w, best_tobj = blk_t, blk_w, blk_tobj
        elif cfg.polish:
            best_w, best_tobj = _polish_rotation(an, bn, un, best_t, best_w,
                                                 best_tobj, cfg.max_rotation)

        # re-estimate the axis at the fixed best rotation (scan subsample),
        # gated by the full-field objective
        ofix = _objective_scan(an_s, bn_s, un_s, fine, best_w)
        jr = _select(ofix, fine)
        rt = fine[jr]
        rt_tobj = _true_objective(an, bn, un, rt, best_w)
        if rt_tobj <= best_tobj:
            best_t = rt.copy()
            best_tobj = rt_tobj
        if cfg.polish:
            best_w, best_tobj = _polish_rotation(an, bn, un, best_t, best_w,
                                                 best_tobj, cfg.max_rotation)
        v_pos = int(np.sum((un - bn @ best_w) * (an @ best_t) < 0.0))
        v_neg = int(np.sum((un - bn @ best_w) * (an @ -best_t) < 0.0))
        if v_neg < v_pos:
            best_t = -best_t
            best_tobj = _true_objective(an, bn, un, best_t, best_w)

    # one longer rotation solve at the final axis, gated like everything else
    long_cfg = replace(cfg, rotation_max_iters=cfg.rotation_max_iters *
                       _FINAL_ITER_SCALE, epsilon=eps)
    w_long = solve_rotation(nf, best_t, cam, long_cfg, w_init=best_w)
    tobj_long = _true_objective(an, bn, un, best_t, w_long)
    if tobj_long <= best_tobj:
        best_w = w_long
        best_tobj = tobj_long
    if cfg.polish:
        best_w, best_tobj = _polish_rotation(an, bn, un, best_t, best_w,
                                             best_tobj, cfg.max_rotation)

    motion = RigidMotion.from_vectors(best_t, best_w)
    return MotionEstimate(
        motion=motion,
        objective=objective(nf, motion, cam),
        negative_depth_count=negative_depth_votes(nf, motion, cam),
        surface=surface,
        scan_objective_min=scan_min,
    )


def positivity_surface(nf: NormalFlowField, cam,
                       config: SolverConfig | None = None,
                       grid_level: int | None = None) -> ResidualSurface:
    """Hinge residual over the hemisphere, rotation solved per candidate.

    Each hemisphere row reports the better of the two signed directions.
    """
    cfg = config or SolverConfig()
    if grid_level is None:
        grid_level = cfg.grid_level_coarse
    if len(nf) < MIN_FIELD_SIZE:
        raise TooFewMeasurements(
            f"{len(nf)} measurements; need >= {MIN_FIELD_SIZE}")
    an, bn, un = _design(nf, cam)
    if len(nf) > cfg.scan_subsample:
        stride = -(-len(nf) // cfg.scan_subsample)
        sub = np.arange(0, len(nf), stride)
        an_s, bn_s, un_s = (np.ascontiguousarray(an[sub]),
                            np.ascontiguousarray(bn[sub]),
                            np.ascontiguousarray(un[sub]))
    else:
        an_s, bn_s, un_s = an, bn, un
    eps_rank = max(1e-3 * float(np.median(np.abs(un_s))), 1e-12)
    hemi = sphere_grid(grid_level)
    cands = np.vstack([hemi, -hemi])
    w_c, _, _ = _scan(an_s, bn_s, un_s, cands, np.zeros_like(cands),
                      eps_rank, cfg, sign_normalized=True)
    full_obj = np.empty(len(cands))
    _kernels.objective_scan_per_w(*_split(an), *_split(bn), un,
                                  np.ascontiguousarray(cands),
                                  np.ascontiguousarray(w_c), full_obj)
    half = len(hemi)
    folded = np.minimum(full_obj[:half], full_obj[half:])
    pick = np.where(full_obj[:half] <= full_obj[half:], np.arange(half),
                    np.arange(half) + half)
    return ResidualSurface(hemi.copy(), folded, w_c[pick].copy())
