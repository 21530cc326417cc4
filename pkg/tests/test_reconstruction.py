"""Structure extraction, inpainting, and motion refinement tests."""

import numpy as np
import pytest

from egoflow.errors import DegenerateSystem, InsufficientData
from egoflow.geometry import RigidMotion, axis_error_deg, normal_design_rows
from egoflow.normal_flow import make_field
from egoflow.reconstruction import (DenseStructure, RefineConfig,
                                    SparseStructure, inpaint, refine_loop,
                                    refine_motion_ls, sample_dense_at,
                                    smoothness_energy,
                                    structure_from_normal_flow)
from egoflow.synthetic import SceneSpec, add_noise, generate_scene


class TestStructureFromNormalFlow:
    def test_known_entry(self, cam100):
        nf = make_field([10.0], [0.0], [1.0], [0.0], [5.0], 200, 200)
        m = RigidMotion.from_vectors([0, 0, 1.0], [0, 0, 0])
        s = structure_from_normal_flow(nf, m, cam100)
        assert s.valid[0]
        assert s.c[0] == pytest.approx(0.5, abs=1e-12)
        assert s.scaled_depth()[0] == pytest.approx(2.0, abs=1e-12)

    def test_ground_truth_exact(self, sparse_scene):
        s = sparse_scene
        st = structure_from_normal_flow(s.field, s.motion, s.camera)
        truth = s.inverse_depth_scaled()
        v = st.valid
        assert v.sum() > 0.9 * len(st.c)
        rel = np.abs(st.c[v] - truth[v]) / truth[v]
        assert rel.max() <= 1e-9

    def test_inverse_consistency(self, sparse_scene):
        s = sparse_scene
        st = structure_from_normal_flow(s.field, s.motion, s.camera)
        v = st.valid
        assert np.max(np.abs(st.c[v] * st.scaled_depth()[v] - 1.0)) <= 1e-12

    def test_zero_denominator_flagged(self, cam100):
        # u_n exactly equal to the rotational component: invalid, not dropped
        m = RigidMotion.from_vectors([0, 0, 1.0], [0.0, -0.1, 0.0])
        nf_probe = make_field([10.0], [5.0], [0.6], [0.8], [0.0], 200, 200)
        _, bn = normal_design_rows(nf_probe.xs, nf_probe.ys, nf_probe.nx,
                                   nf_probe.ny, cam100)
        un = bn @ m.w
        nf = make_field([10.0], [5.0], [0.6], [0.8], un, 200, 200)
        s = structure_from_normal_flow(nf, m, cam100)
        assert len(s.c) == 1
        assert not s.valid[0]


def _affine_structure(w, h, a, b, d, density, seed):
    rng = np.random.default_rng(seed)
    n = int(round(density * w * h))
    flat = rng.choice(w * h, size=n, replace=False)
    cols = flat % w
    rows = flat // w
    cx, cy = (w - 1) / 2, (h - 1) / 2
    xs = cols - cx
    ys = rows - cy
    c = a * xs + b * ys + d
    return SparseStructure(xs=xs.astype(float), ys=ys.astype(float), c=c,
                           valid=np.ones(n, dtype=bool), width=w, height=h)


class TestInpaint:
    def test_affine_exact(self):
        w = h = 80
        a, b, d = 0.003, -0.002, 0.5
        st = _affine_structure(w, h, a, b, d, 0.10, 21)
        dense = inpaint(st)
        cx, cy = (w - 1) / 2, (h - 1) / 2
        cols, rows = np.meshgrid(np.arange(w), np.arange(h))
        truth = a * (cols - cx) + b * (rows - cy) + d
        assert np.max(np.abs(dense.c - truth)) <= 1e-6

    def test_constant_fill(self):
        st = _affine_structure(60, 60, 0.0, 0.0, 0.7, 0.05, 22)
        dense = inpaint(st)
        np.testing.assert_allclose(dense.c, 0.7, atol=1e-8)

    def test_insufficient_data(self):
        st = SparseStructure(xs=np.array([0.0, 1.0]), ys=np.array([0.0, 0.0]),
                             c=np.array([1.0, 1.0]),
                             valid=np.array([True, True]), width=20, height=20)
        with pytest.raises(InsufficientData):
            inpaint(st)

    def test_collinear_data(self):
        st = SparseStructure(xs=np.array([0.0, 1.0, 2.0, 3.0]),
                             ys=np.zeros(4), c=np.ones(4),
                             valid=np.ones(4, dtype=bool), width=20, height=20)
        with pytest.raises(InsufficientData):
            inpaint(st)

    def test_two_plane_phantom_vs_nearest_neighbour(self):
        # smooth surfaces with a step edge: inpainting beats nearest-neighbour
        # fill on the smooth regions and concentrates bad points at the step
        from scipy.interpolate import griddata

        w = h = 64
        cx, cy = (w - 1) / 2, (h - 1) / 2
        cols, rows = np.meshgrid(np.arange(w), np.arange(h))
        xs_full = cols - cx
        ys_full = rows - cy
        truth = np.where(xs_full < 0, 0.4 + 0.004 * ys_full,
                         2.4 + 0.004 * xs_full)
        rng = np.random.default_rng(23)
        n = int(0.10 * w * h)
        flat = rng.choice(w * h, size=n, replace=False)
        sc = flat % w
        sr = flat // w
        st = SparseStructure(xs=(sc - cx).astype(float),
                             ys=(sr - cy).astype(float),
                             c=truth[sr, sc],
                             valid=np.ones(n, dtype=bool), width=w, height=h)
        dense = inpaint(st)
        nn = griddata(np.stack([sc, sr], axis=-1), truth[sr, sc],
                      (cols, rows), method="nearest")
        smooth = np.abs(xs_full) > 6  # away from the step edge
        err_inp = np.abs(dense.c - truth)
        err_nn = np.abs(nn - truth)
        assert err_inp[smooth].mean() < err_nn[smooth].mean()
        bad = err_inp > 1.0
        if bad.any():
            assert np.abs(xs_full[bad]).max() <= 6

    def test_energy_null_space(self):
        rng = np.random.default_rng(24)
        cols, rows = np.meshgrid(np.arange(40), np.arange(40))
        affine = 0.3 * cols - 0.1 * rows + 2.0
        assert smoothness_energy(affine) <= 1e-12
        assert smoothness_energy(affine + rng.normal(size=affine.shape)) > 1.0


class TestRefineMotionLS:
    def test_exact_recovery(self, sparse_scene):
        s = sparse_scene
        st = structure_from_normal_flow(s.field, s.motion, s.camera)
        est, resid = refine_motion_ls(s.field, st.c, s.camera, st.valid)
        assert axis_error_deg(est.t_axis, s.motion.t_axis) <= np.degrees(1e-6)
        assert np.linalg.norm(est.w - s.motion.w) <= 1e-9
        assert resid <= 1e-18

    def test_all_invalid_degenerate(self, sparse_scene):
        s = sparse_scene
        with pytest.raises(DegenerateSystem):
            refine_motion_ls(s.field, np.ones(len(s.field)), s.camera,
                             np.zeros(len(s.field), dtype=bool))

    def test_ls_optimality(self, sparse_scene):
        s = sparse_scene
        noisy = add_noise(s, 0.2, 31)
        st = structure_from_normal_flow(noisy.field, s.motion, s.camera)
        est, resid = refine_motion_ls(noisy.field, st.c, s.camera, st.valid)
        # residual at the fit is no worse than at the ground truth
        an, bn = normal_design_rows(noisy.field.xs[st.valid],
                                    noisy.field.ys[st.valid],
                                    noisy.field.nx[st.valid],
                                    noisy.field.ny[st.valid], s.camera)
        r_tru = (noisy.field.speeds[st.valid] -
                 st.c[st.valid] * (an @ s.motion.t_axis) - bn @ s.motion.w)
        assert resid <= np.mean(r_tru ** 2) + 1e-12


class TestRefineLoop:
    def test_noiseless_converges_fast(self, sparse_scene):
        s = sparse_scene
        init_err = 1.0  # start from a perturbed motion
        rng = np.random.default_rng(32)
        d = rng.normal(size=3)
        d -= (d @ s.motion.t_axis) * s.motion.t_axis
        d /= np.linalg.norm(d)
        t0 = (s.motion.t_axis * np.cos(np.radians(init_err)) +
              d * np.sin(np.radians(init_err)))
        init = RigidMotion(t0, s.motion.w + 0.01)
        motion, dense, report = refine_loop(s.field, init, s.camera,
                                            RefineConfig())
        assert len(report.motions) <= 3 or report.converged
        final_err = axis_error_deg(motion.t_axis, s.motion.t_axis)
        assert final_err <= init_err

    def test_single_iteration_when_tol_infinite(self, sparse_scene):
        s = sparse_scene
        cfg = RefineConfig(depth_convergence_tol=float("inf"))
        _, _, report = refine_loop(s.field, s.motion, s.camera, cfg)
        assert len(report.motions) == 1

    def test_terminates_at_cap(self, sparse_scene):
        s = sparse_scene
        noisy = add_noise(s, 1.0, 33)
        cfg = RefineConfig(max_outer_iters=4, depth_convergence_tol=1e-12)
        _, _, report = refine_loop(noisy.field, s.motion, s.camera, cfg)
        assert len(report.motions) <= 4

    def test_structure_round_trip(self, sparse_scene):
        s = sparse_scene
        st = structure_from_normal_flow(s.field, s.motion, s.camera)
        dense = inpaint(st, s.camera)
        at_entries = sample_dense_at(s.field, dense, s.camera)
        truth = s.inverse_depth_scaled()
        v = st.valid
        assert np.mean(np.abs(at_entries[v] - truth[v])) <= 0.05 * truth.mean()
