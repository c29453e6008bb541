import math

import numpy as np
import pytest

from vertereg import maskgen
from vertereg.cloud import CameraIntrinsics
from vertereg.geom import geodesic_angle, quat_mul, quat_normalize, z_rotation_quat

INTR = CameraIntrinsics(fx=200.0, fy=200.0, cx=32.0, cy=24.0, width=64, height=48)


class TestRenderDepth:
    def test_single_point_on_principal_ray(self):
        depth = maskgen.render_depth(np.array([[0.0, 0.0, 500.0]]), INTR)
        assert (depth > 0).sum() == 1
        assert depth[24, 32] == 500.0

    def test_z_buffer_keeps_nearest(self):
        pts = np.array([[0.0, 0.0, 600.0], [0.0, 0.0, 400.0]])
        depth = maskgen.render_depth(pts, INTR)
        assert depth[24, 32] == 400.0

    def test_dense_plane(self):
        xs, ys = np.meshgrid(np.linspace(-20, 20, 200), np.linspace(-15, 15, 150))
        pts = np.column_stack([xs.ravel(), ys.ravel(), np.full(xs.size, 500.0)])
        depth = maskgen.render_depth(pts, INTR)
        covered = depth > 0
        assert covered.sum() > 100
        np.testing.assert_array_equal(depth[covered], 500.0)

    def test_behind_camera_ignored(self):
        depth = maskgen.render_depth(np.array([[0.0, 0.0, -100.0]]), INTR)
        assert (depth > 0).sum() == 0


class TestSynthMask:
    def test_equal_depths(self):
        rng = np.random.default_rng(0)
        rendered = np.where(rng.random((48, 64)) < 0.5,
                            rng.uniform(300, 700, (48, 64)), 0.0)
        mask = maskgen.synth_mask(rendered, rendered.copy())
        np.testing.assert_array_equal(mask, rendered > 0)

    def test_large_difference_everywhere(self):
        rendered = np.full((10, 10), 500.0)
        mask = maskgen.synth_mask(rendered, rendered + 15.0)
        assert not mask.any()

    def test_occluder_patch(self):
        rendered = np.full((20, 20), 500.0)
        sensor = rendered.copy()
        sensor[5:10, 5:10] = 450.0  # something 50 mm nearer
        mask = maskgen.synth_mask(rendered, sensor)
        assert not mask[5:10, 5:10].any()
        assert mask.sum() == 400 - 25

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            maskgen.synth_mask(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            rendered = rng.uniform(300, 700, (30, 30))
            sensor = rendered + rng.normal(0, 8, (30, 30))
            small = maskgen.synth_mask(rendered, sensor, thresh_mm=5.0)
            large = maskgen.synth_mask(rendered, sensor, thresh_mm=12.0)
            assert not (small & ~large).any()

    def test_requires_both_valid(self):
        rendered = np.full((5, 5), 500.0)
        sensor = rendered.copy()
        sensor[2, 2] = 0.0
        rendered[1, 1] = 0.0
        mask = maskgen.synth_mask(rendered, sensor)
        assert not mask[2, 2] and not mask[1, 1]


class TestSmoothMask:
    def test_isolated_pixel_removed(self):
        mask = np.zeros((31, 31), bool)
        mask[15, 15] = True
        assert not maskgen.smooth_mask(mask).any()  # 1/225 < 0.5

    def test_all_true_interior_survives(self):
        mask = np.ones((40, 40), bool)
        out = maskgen.smooth_mask(mask)
        assert out[10:30, 10:30].all()

    def test_rectangle_boundary_erosion_bounded(self):
        mask = np.zeros((60, 60), bool)
        mask[10:50, 10:50] = True
        out = maskgen.smooth_mask(mask)
        assert out[17:43, 17:43].all()          # interior intact (<= 7 px erosion)
        assert not (out & ~mask).any()          # no dilation beyond the rectangle

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            maskgen.smooth_mask(np.ones((10, 10), bool), k=4)

    def test_window_count_characterization(self):
        # pointwise content of the stability property: a pixel survives
        # exactly when its 15x15 window holds at least ceil(225/2) = 113
        # true pixels; checked against an integral-image counting oracle
        rng = np.random.default_rng(8)
        for _ in range(5):
            mask = rng.random((48, 56)) < rng.uniform(0.3, 0.7)
            out = maskgen.smooth_mask(mask)
            padded = np.pad(mask.astype(np.int64), 7)
            csum = padded.cumsum(axis=0).cumsum(axis=1)
            csum = np.pad(csum, ((1, 0), (1, 0)))
            h, w = mask.shape
            counts = (csum[15:15 + h, 15:15 + w] - csum[:h, 15:15 + w]
                      - csum[15:15 + h, :w] + csum[:h, :w])
            np.testing.assert_array_equal(out, counts >= 113)

    def test_empty_mask_stable(self):
        empty = np.zeros((20, 20), bool)
        np.testing.assert_array_equal(maskgen.smooth_mask(empty), empty)

    def test_k_one_is_identity(self):
        rng = np.random.default_rng(2)
        mask = rng.random((15, 15)) < 0.5
        np.testing.assert_array_equal(maskgen.smooth_mask(mask, k=1), mask)


class TestDiceLoss:
    def test_perfect_overlap_near_zero(self):
        gt = np.zeros((20, 20))
        gt[5:15, 5:15] = 1.0
        loss = maskgen.dice_loss(gt, gt)
        assert loss == pytest.approx(0.0, abs=1e-2)  # only the +1 smoothing

    def test_disjoint_near_one(self):
        a = np.zeros((20, 20))
        b = np.zeros((20, 20))
        a[:5] = 1.0
        b[10:] = 1.0
        assert maskgen.dice_loss(a, b) == pytest.approx(1.0, abs=1e-2)

    def test_half_overlap(self):
        n = 200
        pred = np.zeros(2 * n)
        gt = np.zeros(2 * n)
        pred[:n] = 1.0
        gt[n // 2: n // 2 + n] = 1.0
        loss = maskgen.dice_loss(pred, gt)
        # 1 - (n + 1) / (2n + 1)
        assert loss == pytest.approx(n / (2 * n + 1), abs=1e-12)
        assert loss == pytest.approx(0.5, abs=2.0 / n)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            maskgen.dice_loss(np.zeros((3, 3)), np.zeros((4, 4)))

    def test_range_and_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = (rng.random((10, 10)) < 0.5).astype(float)
            b = (rng.random((10, 10)) < 0.5).astype(float)
            ab = maskgen.dice_loss(a, b)
            assert 0.0 <= ab <= 1.0
            assert ab == pytest.approx(maskgen.dice_loss(b, a), abs=1e-12)


class TestTotalLoss:
    def test_zero_batch(self):
        assert maskgen.total_loss([(0.0, 0.0, 0.0)]) == 0.0

    def test_worked_example(self):
        loss = maskgen.total_loss([(0.2, 0.1, 0.0), (0.4, 0.3, 0.1)])
        assert loss == pytest.approx(0.55, abs=1e-12)

    def test_duplication_invariance(self):
        batch = [(0.3, 0.2, 0.05), (0.6, 0.1, 0.0)]
        assert maskgen.total_loss(batch) == pytest.approx(
            maskgen.total_loss(batch + batch), abs=1e-12)

    def test_concatenation_of_equal_batches(self):
        rng = np.random.default_rng(4)
        a = [tuple(rng.random(3)) for _ in range(8)]
        b = [tuple(rng.random(3)) for _ in range(8)]
        combined = maskgen.total_loss(a + b)
        assert combined == pytest.approx(
            0.5 * (maskgen.total_loss(a) + maskgen.total_loss(b)), abs=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            maskgen.total_loss([])


class TestAugment:
    def test_zero_angle_identity(self):
        rng = np.random.default_rng(5)
        mask = rng.random((20, 30)) < 0.3
        q = quat_normalize(rng.normal(size=4))
        out_mask, out_q = maskgen.augment(mask, q, 0.0)
        np.testing.assert_array_equal(out_mask, mask)
        np.testing.assert_allclose(out_q, q, atol=1e-15)

    def test_pi_on_point_symmetric_mask(self):
        mask = np.zeros((21, 21), bool)
        mask[6, 6] = mask[14, 14] = True
        mask[10, 10] = True
        out_mask, _ = maskgen.augment(mask, np.array([1.0, 0, 0, 0]), math.pi)
        np.testing.assert_array_equal(out_mask, mask)

    def test_round_trip(self):
        rng = np.random.default_rng(6)
        mask = np.zeros((41, 41), bool)
        mask[15:25, 12:30] = True
        q = quat_normalize(rng.normal(size=4))
        alpha = 0.7
        m1, q1 = maskgen.augment(mask, q, alpha)
        m2, q2 = maskgen.augment(m1, q1, -alpha)
        assert geodesic_angle(q, q2) < 1e-12
        # nearest-neighbor resampling: allow a thin boundary disagreement
        assert (m2 ^ mask).sum() <= 0.1 * mask.sum()

    def test_quaternion_update_is_left_z_rotation(self):
        rng = np.random.default_rng(7)
        q = quat_normalize(rng.normal(size=4))
        _, out = maskgen.augment(np.zeros((5, 5), bool), q, 0.4)
        np.testing.assert_allclose(out, quat_mul(z_rotation_quat(0.4), q),
                                   atol=1e-15)
