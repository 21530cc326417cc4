"""Gradient computation and normal-flow extraction tests."""

import numpy as np
import pytest

from egoflow.errors import DimensionMismatch
from egoflow.geometry import CameraIntrinsics, RigidMotion, motion_field_batch
from egoflow.normal_flow import (GradientFrame, compute_gradients,
                                 extract_normal_flow, project_flow,
                                 threshold_for_density)

W = H = 64


@pytest.fixture(scope="module")
def cam():
    return CameraIntrinsics.from_fov(40.0, W, H)


def _frame_from(ix, iy, it):
    shape = np.broadcast(ix, iy, it).shape
    valid = np.zeros(shape, dtype=bool)
    valid[2:-2, 2:-2] = True
    return GradientFrame(ix=np.broadcast_to(ix, shape).astype(float),
                         iy=np.broadcast_to(iy, shape).astype(float),
                         it=np.broadcast_to(it, shape).astype(float),
                         valid=valid)


class TestComputeGradients:
    def test_constant_frames(self):
        a = np.full((H, W), 0.37)
        g = compute_gradients(a, a)
        np.testing.assert_array_equal(g.ix, 0.0)
        np.testing.assert_array_equal(g.iy, 0.0)
        np.testing.assert_array_equal(g.it, 0.0)

    def test_linear_ramp(self):
        x = np.tile(np.arange(W, dtype=float) / W, (H, 1))
        g = compute_gradients(x, x)
        interior = g.valid
        np.testing.assert_allclose(g.ix[interior], 1.0 / W, atol=1e-12)
        np.testing.assert_allclose(g.it[interior], 0.0, atol=1e-15)

    def test_shifted_ramp_normal_speed(self, cam):
        x = np.tile(np.arange(W, dtype=float) / W, (H, 1))
        g = compute_gradients(x, x - 1.0 / W)
        nf = extract_normal_flow(g, 1e-6, cam)
        assert len(nf) > 0
        np.testing.assert_allclose(nf.nx, 1.0, atol=1e-9)
        np.testing.assert_allclose(nf.speeds, 1.0, atol=0.05)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            compute_gradients(np.zeros((4, 5)), np.zeros((5, 4)))


class TestExtractNormalFlow:
    def test_single_pixel_arithmetic(self, cam):
        g = _frame_from(np.full((H, W), 3.0), np.full((H, W), 4.0),
                        np.full((H, W), -10.0))
        nf = extract_normal_flow(g, 1.0, cam)
        np.testing.assert_allclose(nf.nx, 0.6, atol=1e-12)
        np.testing.assert_allclose(nf.ny, 0.8, atol=1e-12)
        np.testing.assert_allclose(nf.speeds, 2.0, atol=1e-12)

    def test_threshold_excludes(self, cam):
        ix = np.zeros((H, W))
        ix[10, 10] = 5.0
        ix[20, 20] = 0.5
        g = _frame_from(ix, np.zeros((H, W)), np.zeros((H, W)))
        nf = extract_normal_flow(g, 1.0, cam)
        assert len(nf) == 1
        assert nf.xs[0] == 10 - cam.cx

    def test_density_monotone_in_threshold(self, cam):
        rng = np.random.default_rng(5)
        a = rng.uniform(0, 1, (H, W))
        b = rng.uniform(0, 1, (H, W))
        g = compute_gradients(a, b)
        prev = np.inf
        for thr in (1e-4, 1e-3, 1e-2, 1e-1):
            d = extract_normal_flow(g, thr, cam).density()
            assert d <= prev
            prev = d

    def test_matches_projection_under_linearized_brightness(self, cam):
        # with I_t := -(I_x u + I_y v), extraction reproduces projection
        rng = np.random.default_rng(6)
        ix = rng.normal(size=(H, W))
        iy = rng.normal(size=(H, W))
        u = rng.normal(size=(H, W))
        v = rng.normal(size=(H, W))
        it = -(ix * u + iy * v)
        g = _frame_from(ix, iy, it)
        nf = extract_normal_flow(g, 0.5, cam)
        flow = np.stack([u, v], axis=-1)
        mag = np.hypot(ix, iy)
        dirs = np.stack([np.where(mag > 0, ix / np.where(mag > 0, mag, 1), 1),
                         np.where(mag > 0, iy / np.where(mag > 0, mag, 1), 0)],
                        axis=-1)
        mask = g.valid & (mag >= 0.5)
        proj = project_flow(flow, dirs, cam, mask)
        np.testing.assert_allclose(nf.speeds, proj.speeds, atol=1e-10)

    def test_rendered_scene_accuracy(self, cam):
        # warp a smooth texture by a known small motion field and check the
        # extracted normal speeds against the projected ground truth
        from scipy.ndimage import gaussian_filter, map_coordinates

        rng = np.random.default_rng(7)
        tex = gaussian_filter(rng.uniform(0, 1, (H, W)), 1.5)
        tex = (tex - tex.min()) / (tex.max() - tex.min())
        motion = RigidMotion.from_vectors([0.1, -0.05, 1.0],
                                          [0.0004, -0.0003, 0.0002])
        cols, rows = np.meshgrid(np.arange(W, dtype=float),
                                 np.arange(H, dtype=float))
        xs, ys = cam.center_points(cols, rows)
        z = np.full((H, W), 8.0)
        flow = motion_field_batch(xs.ravel(), ys.ravel(), z.ravel(), motion,
                                  0.5, cam).reshape(H, W, 2)
        assert np.abs(flow).max() < 1.5
        warped = map_coordinates(tex, [rows - flow[:, :, 1],
                                       cols - flow[:, :, 0]], order=3,
                                 mode="nearest")
        g = compute_gradients(tex, warped)
        thr = threshold_for_density(g, 0.2)
        nf = extract_normal_flow(g, thr, cam)
        assert len(nf) > 100
        cols_i = np.rint(nf.xs + cam.cx).astype(int)
        rows_i = np.rint(nf.ys + cam.cy).astype(int)
        u_gt = flow[rows_i, cols_i]
        un_gt = nf.nx * u_gt[:, 0] + nf.ny * u_gt[:, 1]
        assert np.mean(np.abs(nf.speeds - un_gt)) <= 0.1


class TestProjectFlow:
    def test_parallel(self, cam):
        flow = np.zeros((H, W, 2))
        flow[:, :, 0] = 1.0
        dirs = np.zeros((H, W, 2))
        dirs[:, :, 0] = 1.0
        nf = project_flow(flow, dirs, cam)
        np.testing.assert_array_equal(nf.speeds, 1.0)

    def test_orthogonal(self, cam):
        flow = np.zeros((3, 3, 2))
        flow[:, :, 0] = 1.0
        dirs = np.zeros((3, 3, 2))
        dirs[:, :, 1] = 1.0
        cam3 = CameraIntrinsics(focal_length=10, cx=1, cy=1, width=3, height=3)
        nf = project_flow(flow, dirs, cam3)
        np.testing.assert_array_equal(nf.speeds, 0.0)

    def test_pythagorean(self, cam):
        flow = np.zeros((2, 2, 2))
        flow[:, :, 0] = 3.0
        flow[:, :, 1] = 4.0
        dirs = np.zeros((2, 2, 2))
        dirs[:, :, 0] = 0.6
        dirs[:, :, 1] = 0.8
        cam2 = CameraIntrinsics(focal_length=10, cx=0.5, cy=0.5, width=2,
                                height=2)
        nf = project_flow(flow, dirs, cam2)
        np.testing.assert_allclose(nf.speeds, 5.0, atol=1e-12)

    def test_dimension_mismatch(self, cam):
        with pytest.raises(DimensionMismatch):
            project_flow(np.zeros((4, 4, 2)), np.zeros((5, 5, 2)), cam)

    def test_cauchy_schwarz(self, cam):
        rng = np.random.default_rng(8)
        flow = rng.normal(size=(H, W, 2)) * 3
        ang = rng.uniform(0, 2 * np.pi, (H, W))
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        nf = project_flow(flow, dirs, cam)
        speeds = np.linalg.norm(flow.reshape(-1, 2), axis=1)
        assert np.all(np.abs(nf.speeds) <= speeds + 1e-12)
