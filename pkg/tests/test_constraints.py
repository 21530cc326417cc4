"""Baseline constraint residuals and solvers."""

import numpy as np
import pytest

from egoflow.constraints import (PatchLayout, depth_positivity_votes,
                                 epipolar_residual, orthogonal_flow_rotation,
                                 planar_alternation_history,
                                 robust_sign_votes, solve_epipolar,
                                 solve_planar_patches, solve_sign_voting,
                                 squared_distance_residual)
from egoflow.errors import NonPositiveDepth, TooFewMeasurements
from egoflow.geometry import (CameraIntrinsics, RigidMotion, axis_error_deg,
                              apply_rotation, apply_translation,
                              normal_design_rows)
from egoflow.normal_flow import make_field


def _flow_set(cam, motion, speed, n=300, seed=0, zmin=1.0, zmax=10.0):
    rng = np.random.default_rng(seed)
    half_w = cam.width / 2 - 5
    half_h = cam.height / 2 - 5
    xs = rng.uniform(-half_w, half_w, n)
    ys = rng.uniform(-half_h, half_h, n)
    z = rng.uniform(zmin, zmax, n)
    at = apply_translation(xs, ys, motion.t_axis, cam)
    bw = apply_rotation(xs, ys, motion.w, cam)
    flows = (speed / z)[:, None] * at + bw
    return np.stack([xs, ys], axis=-1), flows, z


def _planar_field(cam, motion, speed, v_plane, n=800, seed=1):
    """Normal flow from a scene that is exactly one plane (1/Z affine)."""
    rng = np.random.default_rng(seed)
    half_w = cam.width / 2 - 5
    half_h = cam.height / 2 - 5
    xs = rng.uniform(-half_w, half_w, n)
    ys = rng.uniform(-half_h, half_h, n)
    inv_z = (v_plane[0] * xs / cam.focal_length +
             v_plane[1] * ys / cam.focal_length + v_plane[2])
    assert np.all(inv_z > 0)
    ang = rng.uniform(0, 2 * np.pi, n)
    nx, ny = np.cos(ang), np.sin(ang)
    an, bn = normal_design_rows(xs, ys, nx, ny, cam)
    un = speed * inv_z * (an @ motion.t_axis) + bn @ motion.w
    return make_field(xs, ys, nx, ny, un, cam.width, cam.height)


@pytest.fixture(scope="module")
def cam():
    return CameraIntrinsics.from_fov(35.0, 160, 160)


@pytest.fixture(scope="module")
def motion():
    return RigidMotion.from_vectors([0.25, -0.1, 0.96], [0.03, -0.05, 0.02])


class TestEpipolarResidual:
    def test_zero_at_ground_truth(self, cam, motion):
        pos, flows, _ = _flow_set(cam, motion, 1.5)
        assert epipolar_residual(pos, flows, motion, cam) <= 1e-9
        assert epipolar_residual(pos, flows, motion, cam, unbiased=True) <= 1e-9

    def test_pure_rotation_zero_everywhere(self, cam):
        m = RigidMotion.from_vectors([0, 0, 1.0], [0.02, 0.01, -0.03])
        rng = np.random.default_rng(3)
        pos = rng.uniform(-70, 70, (100, 2))
        flows = apply_rotation(pos[:, 0], pos[:, 1], m.w, cam)
        for _ in range(5):
            t = rng.normal(size=3)
            probe = RigidMotion.from_vectors(t, m.w)
            assert epipolar_residual(pos, flows, probe, cam) <= 1e-9

    def test_depth_invariance(self, cam, motion):
        # two noiseless fields from the same motion but different depth maps
        pos1, flows1, _ = _flow_set(cam, motion, 2.0, seed=4, zmin=1, zmax=5)
        pos2, flows2, _ = _flow_set(cam, motion, 2.0, seed=4, zmin=6, zmax=20)
        assert epipolar_residual(pos1, flows1, motion, cam) <= 1e-9
        assert epipolar_residual(pos2, flows2, motion, cam) <= 1e-9

    def test_too_few(self, cam, motion):
        with pytest.raises(TooFewMeasurements):
            epipolar_residual(np.zeros((4, 2)), np.zeros((4, 2)), motion, cam)


class TestSolveEpipolar:
    def test_noiseless_recovery(self, cam, motion):
        pos, flows, _ = _flow_set(cam, motion, 1.5, n=250, seed=5)
        est, surface, flat = solve_epipolar(pos, flows, cam, grid_level=4)
        assert not flat
        spacing = 4.0 / 2 ** 4
        assert axis_error_deg(est.t_axis, motion.t_axis) <= spacing
        assert np.linalg.norm(est.w - motion.w) <= 1e-3

    def test_pure_rotation_flags_degenerate(self, cam):
        m = RigidMotion.from_vectors([0, 0, 1.0], [0.01, -0.02, 0.015])
        rng = np.random.default_rng(6)
        pos = rng.uniform(-70, 70, (150, 2))
        flows = apply_rotation(pos[:, 0], pos[:, 1], m.w, cam)
        est, surface, flat = solve_epipolar(pos, flows, cam, grid_level=1)
        assert flat
        assert np.linalg.norm(est.w - m.w) <= 1e-6

    def test_surface_csv(self, cam, motion, tmp_path):
        pos, flows, _ = _flow_set(cam, motion, 1.5, n=60, seed=7)
        _, surface, _ = solve_epipolar(pos, flows, cam, grid_level=0)
        path = tmp_path / "surface.csv"
        surface.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "tx,ty,tz,residual,wx,wy,wz"
        assert len(lines) == len(surface.residuals) + 1


class TestSolvePlanarPatches:
    def test_single_plane_exact(self, cam, motion):
        v_plane = np.array([0.02, -0.01, 0.4])
        speed = 1.3
        nf = _planar_field(cam, motion, speed, v_plane)
        est, patches, surface, dropped = solve_planar_patches(
            nf, cam, grid_level=1)
        assert surface.residuals[surface.argmin_index] <= 1e-8,             "noiseless single-plane residual must vanish"
        assert axis_error_deg(est.t_axis, motion.t_axis) <= 2.0

    def test_frontoparallel_plane_vector(self, cam):
        # plane 1/Z = const: recovered scaled vector is speed*(0, 0, 1/Z)
        z0 = 4.0
        speed = 2.0
        motion = RigidMotion.from_vectors([0.3, 0.2, 0.93], [0.01, 0.02, -0.01])
        nf = _planar_field(cam, motion, speed, np.array([0.0, 0.0, 1.0 / z0]),
                           n=900, seed=8)
        est, patches, _, _ = solve_planar_patches(nf, cam, grid_level=1)
        sign = np.sign(est.t_axis @ motion.t_axis)
        for p in patches:
            np.testing.assert_allclose(sign * p.v, [0.0, 0.0, speed / z0],
                                       atol=5e-3)

    def test_piecewise_planar_recovery(self, cam):
        # two slanted planes split left/right, 8x8 patches
        rng = np.random.default_rng(9)
        motion = RigidMotion.from_vectors([-0.2, 0.15, 0.97],
                                          [0.02, -0.03, 0.04])
        speed = 1.7
        n = 960
        xs = rng.uniform(-73, 73, n)
        ys = rng.uniform(-73, 73, n)
        inv_z = np.where(xs < 0,
                         0.001 * xs + 0.0005 * ys + 0.35,
                         -0.0012 * xs + 0.0003 * ys + 0.22)
        ang = rng.uniform(0, 2 * np.pi, n)
        nx, ny = np.cos(ang), np.sin(ang)
        an, bn = normal_design_rows(xs, ys, nx, ny, cam)
        un = speed * inv_z * (an @ motion.t_axis) + bn @ motion.w
        nf = make_field(xs, ys, nx, ny, un, cam.width, cam.height)
        est, _, _, _ = solve_planar_patches(nf, cam, grid_level=2)
        assert axis_error_deg(est.t_axis, motion.t_axis) <= 1.0

    def test_too_few_measurements(self, cam, motion):
        nf = _planar_field(cam, motion, 1.0, np.array([0, 0, 0.3]), n=100)
        with pytest.raises(TooFewMeasurements):
            solve_planar_patches(nf, cam, layout=PatchLayout(8, 8),
                                 min_patch_points=1)

    def test_monotone_alternation(self, cam, motion):
        nf = _planar_field(cam, motion, 1.0, np.array([0.01, 0.005, 0.3]),
                           n=600, seed=10)
        hist = planar_alternation_history(nf, cam, motion.t_axis, iters=12)
        assert np.all(np.diff(hist) <= 1e-9 * max(1.0, hist[0]))


class TestVotes:
    def test_zero_at_truth(self, sparse_scene):
        s = sparse_scene
        assert depth_positivity_votes(s.field, s.motion, s.camera) == 0

    def test_all_violated_when_flipped(self, sparse_scene):
        s = sparse_scene
        flipped = RigidMotion(-s.motion.t_axis, s.motion.w)
        assert depth_positivity_votes(s.field, flipped, s.camera) == len(s.field)

    def test_recount_oracle(self, sparse_scene):
        s = sparse_scene
        rng = np.random.default_rng(11)
        for _ in range(5):
            m = RigidMotion.from_vectors(rng.normal(size=3),
                                         rng.normal(size=3) * 0.1)
            count = 0
            an, bn = normal_design_rows(s.field.xs, s.field.ys, s.field.nx,
                                        s.field.ny, s.camera)
            for i in range(len(s.field)):
                f = (s.field.speeds[i] - bn[i] @ m.w) * (an[i] @ m.t_axis)
                if f < 0:
                    count += 1
            assert depth_positivity_votes(s.field, m, s.camera) == count


class TestRobustSignVotes:
    def test_zero_at_truth(self, sparse_scene):
        s = sparse_scene
        assert robust_sign_votes(s.field, s.motion, s.camera) == 0

    def test_single_entry_pattern(self, cam100):
        # u_n > 0, n.Bw < 0 and n.At < 0 counts as one violation
        nf = make_field([10.0], [0.0], [-1.0], [0.0], [2.0], 200, 200)
        m = RigidMotion.from_vectors([0, 0, 1.0], [0.0, -0.1, 0.0])
        an, bn = normal_design_rows(nf.xs, nf.ys, nf.nx, nf.ny, cam100)
        assert (an @ m.t_axis)[0] < 0
        assert (bn @ m.w)[0] < 0
        assert robust_sign_votes(nf, m, cam100) == 1

    def test_bounded_by_positivity_votes(self, sparse_scene):
        s = sparse_scene
        rng = np.random.default_rng(12)
        for _ in range(10):
            m = RigidMotion.from_vectors(rng.normal(size=3),
                                         rng.normal(size=3) * 0.1)
            assert (robust_sign_votes(s.field, m, s.camera) <=
                    depth_positivity_votes(s.field, m, s.camera))


class TestOrthogonalFlowRotation:
    def test_exact_rotation_from_orthogonal_subset(self, cam, motion):
        # build entries whose directions are exactly orthogonal to A t
        rng = np.random.default_rng(13)
        n = 400
        xs = rng.uniform(-70, 70, n)
        ys = rng.uniform(-70, 70, n)
        at = apply_translation(xs, ys, motion.t_axis, cam)
        norm = np.linalg.norm(at, axis=1)
        nx = -at[:, 1] / norm
        ny = at[:, 0] / norm
        z = rng.uniform(1, 10, n)
        an, bn = normal_design_rows(xs, ys, nx, ny, cam)
        un = (1.3 / z) * (an @ motion.t_axis) + bn @ motion.w
        nf = make_field(xs, ys, nx, ny, un, cam.width, cam.height)
        w, m = orthogonal_flow_rotation(nf, motion.t_axis, cam, ortho_tol=1e-6)
        assert m == n
        np.testing.assert_allclose(w, motion.w, atol=1e-6)

    def test_pure_rotation_any_axis(self, cam):
        m = RigidMotion.from_vectors([0, 0, 1.0], [0.02, -0.01, 0.03])
        rng = np.random.default_rng(14)
        n = 300
        xs = rng.uniform(-70, 70, n)
        ys = rng.uniform(-70, 70, n)
        ang = rng.uniform(0, 2 * np.pi, n)
        nx, ny = np.cos(ang), np.sin(ang)
        _, bn = normal_design_rows(xs, ys, nx, ny, cam)
        un = bn @ m.w
        nf = make_field(xs, ys, nx, ny, un, cam.width, cam.height)
        for t in ([0, 0, 1.0], [1.0, 0, 0], [0.5, 0.5, 0.707]):
            w, _ = orthogonal_flow_rotation(nf, np.asarray(t) /
                                            np.linalg.norm(t), cam, 0.5)
            np.testing.assert_allclose(w, m.w, atol=1e-9)

    def test_count_monotone_in_tolerance(self, sparse_scene):
        s = sparse_scene
        prev = np.inf
        for tol in (0.5, 0.2, 0.1, 0.05, 0.02):
            try:
                _, m = orthogonal_flow_rotation(s.field, s.motion.t_axis,
                                                s.camera, tol)
            except TooFewMeasurements:
                m = 0
            assert m <= prev
            prev = m

    def test_too_few(self, cam, motion):
        nf = _planar_field(cam, motion, 1.0, np.array([0, 0, 0.3]), n=10)
        with pytest.raises(TooFewMeasurements):
            orthogonal_flow_rotation(nf, motion.t_axis, cam, 1e-9)


class TestSquaredDistanceResidual:
    def test_zero_at_truth(self, cam, motion):
        pos, flows, z = _flow_set(cam, motion, 1.4, seed=15)
        r = squared_distance_residual(pos, flows, motion, z, cam, speed=1.4)
        assert r <= 1e-9

    def test_single_perturbation(self, cam, motion):
        pos, flows, z = _flow_set(cam, motion, 1.4, seed=16)
        delta = np.array([0.3, -0.4])
        flows2 = flows.copy()
        flows2[7] += delta
        r = squared_distance_residual(pos, flows2, motion, z, cam, speed=1.4)
        assert r == pytest.approx(np.linalg.norm(delta), rel=1e-9)

    def test_equals_pointwise_oracle(self, cam, motion):
        from egoflow.geometry import motion_field

        pos, flows, z = _flow_set(cam, motion, 1.4, n=40, seed=17)
        rng = np.random.default_rng(18)
        flows = flows + rng.normal(size=flows.shape)
        total = 0.0
        for i in range(len(pos)):
            u = motion_field(pos[i], z[i], motion, 1.4, cam)
            total += np.linalg.norm(flows[i] - u)
        r = squared_distance_residual(pos, flows, motion, z, cam, speed=1.4)
        assert r == pytest.approx(total, rel=1e-12)

    def test_nonpositive_depth(self, cam, motion):
        with pytest.raises(NonPositiveDepth):
            squared_distance_residual(np.zeros((5, 2)), np.zeros((5, 2)),
                                      motion, np.array([1, 2, 0, 3, 4.0]), cam)


class TestSignVotingSolver:
    def test_rough_recovery(self, sparse_scene):
        s = sparse_scene
        est, surface = solve_sign_voting(s.field, s.camera, grid_level=1)
        assert axis_error_deg(est.t_axis, s.motion.t_axis) <= 10.0
