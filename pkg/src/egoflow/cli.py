"""Command line interface.

Subcommands: estimate, synth-bench, trajectory, surface, eval-structure,
eval-motion.  All numeric outputs are JSON or CSV with a schema_version
field; plots are SVG.  Every subcommand is deterministic given --seed and
--threads.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numba
import numpy as np

from . import constraints, dataset_io, metrics, positivity, synthetic
from .errors import EgoflowError, UnknownConstraint
from .geometry import CameraIntrinsics, axis_error_deg
from .normal_flow import compute_gradients, extract_normal_flow, threshold_for_density
from .positivity import SolverConfig, estimate_motion
from .reconstruction import (RefineConfig, inpaint, refine_loop,
                             structure_from_normal_flow)

SCHEMA_VERSION = 1
DEFAULT_SEED = 20177


def _set_threads(n: int | None) -> None:
    if n and n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _solver_config(args) -> SolverConfig:
    kw = {}
    if getattr(args, "grid_level", None) is not None:
        kw["grid_level_fine"] = args.grid_level
    if getattr(args, "epsilon", None) is not None:
        kw["epsilon"] = args.epsilon
    return SolverConfig(**kw)


def _resolve_camera(args, sample_dir: Path | None, width=None, height=None):
    if sample_dir is not None:
        sidecar = sample_dir / "intrinsics.json"
        if sidecar.exists():
            return dataset_io.load_intrinsics(sidecar)
    if getattr(args, "focal_px", None) is not None:
        if width is None:
            raise EgoflowError("--focal-px requires frame input")
        return CameraIntrinsics(focal_length=args.focal_px, cx=(width - 1) / 2,
                                cy=(height - 1) / 2, width=width, height=height)
    if getattr(args, "fov", None) is not None:
        if width is None:
            raise EgoflowError("--fov requires frame input")
        return CameraIntrinsics.from_fov(args.fov, width, height)
    return None


def _load_input_field(args):
    """Normal flow from a sample directory or from a frame sequence."""
    path = Path(args.input)
    if path.is_dir() and (path / "normal_flow.csv").exists():
        field, cam = synthetic.load_field(path)
        return field, cam
    seq = dataset_io.load_sequence(args.input, fov_deg=getattr(args, "fov", None))
    cam = seq.intrinsics or _resolve_camera(args, None, seq.frames.shape[2],
                                            seq.frames.shape[1])
    if cam is None:
        print("error: no intrinsics; provide --fov or --focal-px",
              file=sys.stderr)
        raise SystemExit(2)
    g = compute_gradients(seq.frames[0], seq.frames[1])
    thr = threshold_for_density(g, args.density_threshold)
    return extract_normal_flow(g, thr, cam), cam


def cmd_estimate(args) -> int:
    _set_threads(args.threads)
    field, cam = _load_input_field(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _solver_config(args)
    est = estimate_motion(field, cam, cfg)
    motion = est.motion
    refine_report = None
    if args.no_refine:
        struct = structure_from_normal_flow(field, motion, cam)
        dense = inpaint(struct, cam)
    else:
        motion, dense, refine_report = refine_loop(field, motion, cam,
                                                   RefineConfig())
    motion_doc = {
        "schema_version": SCHEMA_VERSION,
        "t_axis": motion.t_axis.tolist(),
        "w": motion.w.tolist(),
        "objective": est.objective,
        "negative_depth_count": est.negative_depth_count,
        "refined": not args.no_refine,
    }
    (out / "motion.json").write_text(json.dumps(motion_doc, indent=2) + "\n")
    dataset_io.save_raster(out / "structure.f32", dense.c)
    dataset_io.structure_to_png(out / "structure.png", dense.c)
    report = {
        "schema_version": SCHEMA_VERSION,
        "n_measurements": len(field),
        "density": field.density(),
        "solver": {"grid_level_coarse": cfg.grid_level_coarse,
                   "grid_level_fine": cfg.grid_level_fine,
                   "outer_rounds": cfg.outer_rounds},
        "refine_iterations": (len(refine_report.motions)
                              if refine_report else 0),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return 0


_BENCH_SOLVERS = ("positive-depth", "positive-depth-refined", "epipolar",
                  "planar", "sign-voting")


def _bench_one(solver, sample, noisy_field, cfg):
    cam = sample.camera
    if solver == "positive-depth":
        est = estimate_motion(noisy_field, cam, cfg)
        return est.motion
    if solver == "positive-depth-refined":
        est = estimate_motion(noisy_field, cam, cfg)
        motion, _, _ = refine_loop(noisy_field, est.motion, cam, RefineConfig())
        return motion
    if solver == "epipolar":
        f = noisy_field
        positions = np.stack([f.xs, f.ys], axis=-1)
        from .geometry import apply_rotation, apply_translation
        at = apply_translation(f.xs, f.ys, sample.motion.t_axis, cam)
        bw = apply_rotation(f.xs, f.ys, sample.motion.w, cam)
        flows = (sample.speed / sample.entry_depths)[:, None] * at + bw
        if sample.noise_sigma > 0:
            rng = np.random.Generator(np.random.Philox(
                key=np.uint64(sample.seed + 1)))
            flows = flows + sample.noise_sigma * rng.standard_normal(flows.shape)
        motion, _, _ = constraints.solve_epipolar(positions, flows, cam,
                                                  grid_level=1)
        return motion
    if solver == "planar":
        motion, _, _, _ = constraints.solve_planar_patches(noisy_field, cam,
                                                           grid_level=1)
        return motion
    if solver == "sign-voting":
        motion, _ = constraints.solve_sign_voting(noisy_field, cam,
                                                  grid_level=1)
        return motion
    raise UnknownConstraint(solver)


def cmd_synth_bench(args) -> int:
    _set_threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = synthetic.SceneSpec(density=args.density)
    cfg = _solver_config(args)
    solvers = args.solvers or list(_BENCH_SOLVERS)
    for s in solvers:
        if s not in _BENCH_SOLVERS:
            print(f"error: unknown solver {s!r}", file=sys.stderr)
            raise SystemExit(2)
    rows = ["schema_version,seed,noise_rel,solver,trans_aae_deg,rot_epe_deg,rot_aae_deg"]
    agg: dict = {}
    for k in range(args.scenes):
        seed = args.seed + k
        sample = synthetic.generate_scene(seed, spec)
        for rel in args.noise:
            sigma = rel * float(np.mean(np.abs(sample.field.speeds)))
            noisy = synthetic.add_noise(sample, sigma, seed + 7919)
            for solver in solvers:
                motion = _bench_one(solver, noisy, noisy.field, cfg)
                t_err = axis_error_deg(motion.t_axis, sample.motion.t_axis)
                r_epe = float(np.degrees(np.linalg.norm(
                    motion.w - sample.motion.w)))
                r_aae = metrics.aae(motion.w, sample.motion.w)
                rows.append(f"{SCHEMA_VERSION},{seed},{float(rel)!r},"
                            f"{solver},{float(t_err)!r},{float(r_epe)!r},"
                            f"{float(r_aae)!r}")
                agg.setdefault((rel, solver), []).append((t_err, r_epe))
    (out / "bench.csv").write_text("\n".join(rows) + "\n")
    summary = {"schema_version": SCHEMA_VERSION, "scenes": args.scenes,
               "seed": args.seed, "rng": {"name": synthetic.RNG_NAME,
                                          "numpy": np.__version__},
               "aggregates": {}}
    for (rel, solver), vals in sorted(agg.items()):
        arr = np.array(vals)
        summary["aggregates"][f"noise={rel}:{solver}"] = {
            "trans_aae_deg_mean": float(arr[:, 0].mean()),
            "trans_aae_deg_median": float(np.median(arr[:, 0])),
            "rot_epe_deg_mean": float(arr[:, 1].mean()),
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_trajectory(args) -> int:
    _set_threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seq = dataset_io.load_sequence(args.input, fov_deg=args.fov)
    cam = seq.intrinsics
    if cam is None:
        print("error: no intrinsics; provide --fov or an intrinsics.json",
              file=sys.stderr)
        raise SystemExit(2)
    poses = None
    if args.poses:
        if Path(args.poses).exists():
            poses = dataset_io.load_poses(args.poses)
        else:
            print(f"warning: poses file {args.poses} absent; using unit speeds",
                  file=sys.stderr)
    cfg = _solver_config(args)
    motions = []
    for k in range(len(seq) - 1):
        g = compute_gradients(seq.frames[k], seq.frames[k + 1])
        thr = threshold_for_density(g, args.density_threshold)
        field = extract_normal_flow(g, thr, cam)
        est = estimate_motion(field, cam, cfg)
        motion = est.motion
        if not args.no_refine:
            try:
                motion, _, _ = refine_loop(field, motion, cam, RefineConfig())
            except EgoflowError:
                pass
        motions.append(motion)
    if poses is not None and len(poses) >= len(seq):
        speeds = poses.speeds()[:len(motions)]
    else:
        speeds = np.ones(len(motions))
    traj = dataset_io.integrate_trajectory(motions, speeds)
    traj.to_csv(out / "trajectory.csv")
    traj.to_svg(out / "trajectory.svg")
    if poses is not None and len(poses) >= len(seq):
        gt_motions, _ = poses.frame_motions()
        rows = ["schema_version,frame,trans_aae_deg,rot_epe_deg"]
        for k, (m, gt) in enumerate(zip(motions, gt_motions)):
            t_err = axis_error_deg(m.t_axis, gt.t_axis)
            r_epe = float(np.degrees(np.linalg.norm(m.w - gt.w)))
            rows.append(f"{SCHEMA_VERSION},{k},{float(t_err)!r},"
                        f"{float(r_epe)!r}")
        (out / "errors.csv").write_text("\n".join(rows) + "\n")
    return 0


def cmd_surface(args) -> int:
    _set_threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.constraint not in ("epipolar", "planar", "positive-depth"):
        print(f"error: unknown constraint {args.constraint!r}", file=sys.stderr)
        raise SystemExit(2)
    path = Path(args.input)
    if args.constraint == "epipolar":
        if not args.flow:
            print("error: epipolar surfaces need --flow FILE.flo",
                  file=sys.stderr)
            raise SystemExit(2)
        flow, known = dataset_io.load_flo(args.flow)
        cam = _resolve_camera(args, path if path.is_dir() else None,
                              flow.shape[1], flow.shape[0])
        if cam is None:
            cam = CameraIntrinsics.from_fov(args.fov or 45.0, flow.shape[1],
                                            flow.shape[0])
        rows_idx, cols_idx = np.nonzero(known)
        xs, ys = cam.center_points(cols_idx, rows_idx)
        positions = np.stack([xs, ys], axis=-1)
        flows = flow[rows_idx, cols_idx]
        _, surface, _ = constraints.solve_epipolar(positions, flows, cam,
                                                   grid_level=args.grid_level)
    else:
        field, cam = synthetic.load_field(path)
        if args.constraint == "planar":
            _, _, surface, _ = constraints.solve_planar_patches(
                field, cam, grid_level=args.grid_level)
        else:
            surface = positivity.positivity_surface(
                field, cam, _solver_config(args), grid_level=args.grid_level)
    surface.to_csv(out / "surface.csv")
    j = surface.argmin_index
    doc = {"schema_version": SCHEMA_VERSION, "argmin_index": j,
           "t_axis": surface.directions[j].tolist(),
           "residual": float(surface.residuals[j]),
           "w": surface.rotations[j].tolist()}
    (out / "surface_argmin.json").write_text(json.dumps(doc, indent=2) + "\n")
    return 0


def cmd_eval_structure(args) -> int:
    est = dataset_io.load_raster(args.estimated)
    tru = dataset_io.load_raster(args.truth)
    if est.shape != tru.shape:
        print("error: raster shapes differ", file=sys.stderr)
        return 1
    mask = np.isfinite(tru)
    report = metrics.ErrorReport(
        mae=metrics.mae(est, tru, mask),
        pobp=metrics.pobp(est, tru, mask, threshold=args.threshold),
        density=float(np.mean(mask)),
        n_points=int(mask.sum()),
    )
    Path(args.out).write_text(report.to_json() + "\n")
    return 0


def cmd_eval_motion(args) -> int:
    est = json.loads(Path(args.estimated).read_text())
    tru = json.loads(Path(args.truth).read_text())
    t_est = np.asarray(est["t_axis"], dtype=float)
    t_tru = np.asarray(tru["t_axis"], dtype=float)
    w_est = np.asarray(est["w"], dtype=float)
    w_tru = np.asarray(tru["w"], dtype=float)
    report = metrics.ErrorReport(
        trans_aae_deg=metrics.aae(t_est, t_tru),
        rot_aae_deg=metrics.aae(w_est, w_tru),
        rot_epe_deg=float(np.degrees(np.linalg.norm(w_est - w_tru))),
        n_points=1,
    )
    Path(args.out).write_text(report.to_json() + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egoflow",
                                description="Direct egomotion and scaled "
                                            "depth from normal flow")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, input_arg=True):
        if input_arg:
            sp.add_argument("input", help="sample directory or frame "
                                          "directory/glob")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--fov", type=float, default=None,
                        help="horizontal field of view in degrees")
        sp.add_argument("--focal-px", type=float, default=None,
                        help="focal length in pixels")
        sp.add_argument("--grid-level", type=int, default=None,
                        help="fine sphere-grid level")
        sp.add_argument("--epsilon", type=float, default=None,
                        help="hinge smoothing half-width")
        sp.add_argument("--density-threshold", type=float, default=0.10,
                        help="target normal-flow density for extraction")
        sp.add_argument("--no-refine", action="store_true")
        sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
        sp.add_argument("--threads", type=int, default=0,
                        help="worker threads for the translation search")

    sp = sub.add_parser("estimate", help="estimate motion and structure")
    common(sp)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("synth-bench", help="run solvers on seeded scenes")
    common(sp, input_arg=False)
    sp.add_argument("--scenes", type=int, default=20)
    sp.add_argument("--noise", type=float, nargs="*", default=[0.0],
                    help="noise levels as fractions of mean |u_n|")
    sp.add_argument("--solvers", nargs="*", default=None,
                    choices=list(_BENCH_SOLVERS))
    sp.add_argument("--density", type=float, default=1.0)
    sp.set_defaults(func=cmd_synth_bench)

    sp = sub.add_parser("trajectory", help="integrate per-frame estimates")
    common(sp)
    sp.add_argument("--poses", default=None, help="ground-truth pose file")
    sp.set_defaults(func=cmd_trajectory)

    sp = sub.add_parser("surface", help="residual surface over the sphere")
    common(sp)
    sp.add_argument("--constraint", required=True)
    sp.add_argument("--flow", default=None, help=".flo file for epipolar")
    sp.set_defaults(func=cmd_surface)
    # surface wants a coarser default level than estimation
    sp.set_defaults(grid_level=1)

    sp = sub.add_parser("eval-structure", help="MAE/PoBP against a raster")
    sp.add_argument("estimated")
    sp.add_argument("truth")
    sp.add_argument("--threshold", type=float, default=1.0)
    sp.add_argument("--out", default="structure_eval.json")
    sp.set_defaults(func=cmd_eval_structure)

    sp = sub.add_parser("eval-motion", help="AAE/EPE against a motion JSON")
    sp.add_argument("estimated")
    sp.add_argument("truth")
    sp.add_argument("--out", default="motion_eval.json")
    sp.set_defaults(func=cmd_eval_motion)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EgoflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
