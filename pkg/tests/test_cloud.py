import math

import numpy as np
import pytest

from vertereg import cloud, maskgen
from vertereg.cloud import CameraIntrinsics


INTR = CameraIntrinsics(fx=300.0, fy=300.0, cx=64.0, cy=48.0, width=128, height=96)


class TestIntrinsics:
    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=0.0, fy=1.0, cx=0, cy=0, width=10, height=10)

    def test_rejects_principal_point_outside(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1.0, fy=1.0, cx=20, cy=0, width=10, height=10)


class TestDepthToCloud:
    def test_principal_ray(self):
        depth = np.zeros((96, 128))
        depth[48, 64] = 500.0
        pts = cloud.depth_to_cloud(depth, INTR)
        np.testing.assert_allclose(pts, [[0.0, 0.0, 500.0]])

    def test_all_false_mask(self):
        depth = np.full((96, 128), 400.0)
        pts = cloud.depth_to_cloud(depth, INTR, np.zeros((96, 128), dtype=bool))
        assert pts.shape == (0, 3)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cloud.depth_to_cloud(np.zeros((10, 10)), INTR)
        with pytest.raises(ValueError):
            cloud.depth_to_cloud(np.zeros((96, 128)), INTR, np.zeros((5, 5), bool))

    def test_count_bounded_by_valid_pixels(self):
        rng = np.random.default_rng(0)
        depth = rng.uniform(100, 800, (96, 128))
        depth[rng.random((96, 128)) < 0.4] = 0.0
        pts = cloud.depth_to_cloud(depth, INTR)
        assert pts.shape[0] == int((depth > 0).sum())

    def test_render_round_trip(self):
        # points on distinct pixels survive a render/back-project cycle to
        # within half a pixel footprint
        rng = np.random.default_rng(1)
        z = rng.uniform(400, 600, 200)
        u = rng.integers(2, 126, 200)
        v = rng.integers(2, 94, 200)
        keep = np.unique(v * 128 + u, return_index=True)[1]
        pts = np.column_stack([z * (u - INTR.cx) / INTR.fx,
                               z * (v - INTR.cy) / INTR.fy, z])[keep]
        depth = maskgen.render_depth(pts, INTR)
        back = cloud.depth_to_cloud(depth, INTR)
        assert back.shape == pts[np.lexsort((pts[:, 0], pts[:, 1]))].shape
        # exact grid placement: back-projection is lossless here
        a = pts[np.lexsort((u[keep], v[keep]))]
        np.testing.assert_allclose(np.sort(back, axis=0), np.sort(a, axis=0),
                                   atol=1e-9)

    def test_render_round_trip_offgrid(self):
        rng = np.random.default_rng(2)
        pts = np.column_stack([rng.uniform(-30, 30, 300),
                               rng.uniform(-20, 20, 300),
                               rng.uniform(450, 550, 300)])
        depth = maskgen.render_depth(pts, INTR)
        back = cloud.depth_to_cloud(depth, INTR)
        # every reconstructed point lies within half a pixel footprint of a true point
        _, _, dist = cloud.nearest_neighbors(pts, back, max_dist=np.inf)
        footprint = 550.0 / INTR.fx
        assert dist.max() <= 0.5 * footprint * math.sqrt(2.0) + 1e-9


class TestCentroid:
    def test_single_point(self):
        np.testing.assert_allclose(cloud.centroid([[1.0, 2.0, 3.0]]), [1, 2, 3])

    def test_two_points(self):
        np.testing.assert_allclose(cloud.centroid([[0.0, 0, 0], [2.0, 0, 0]]),
                                   [1, 0, 0])

    def test_empty(self):
        with pytest.raises(cloud.EmptyCloudError):
            cloud.centroid(np.zeros((0, 3)))

    def test_against_summation_oracle(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(0, 100, (1000, 3))
        oracle = np.array([math.fsum(pts[:, k]) / 1000 for k in range(3)])
        np.testing.assert_allclose(cloud.centroid(pts), oracle, atol=1e-9)


class TestLargestComponent:
    def test_single_blob_unchanged(self):
        mask = np.zeros((10, 10), bool)
        mask[2:5, 2:5] = True
        np.testing.assert_array_equal(cloud.largest_component(mask), mask)

    def test_keeps_larger_blob(self):
        mask = np.zeros((12, 12), bool)
        mask[1:3, 1:6] = True       # 10 pixels
        mask[8:9, 8:11] = True      # 3 pixels
        out = cloud.largest_component(mask)
        expected = np.zeros_like(mask)
        expected[1:3, 1:6] = True
        np.testing.assert_array_equal(out, expected)

    def test_empty_mask(self):
        mask = np.zeros((6, 6), bool)
        np.testing.assert_array_equal(cloud.largest_component(mask), mask)

    def test_diagonal_is_connected(self):
        mask = np.eye(5, dtype=bool)
        mask[4, 0] = True  # separate single pixel
        out = cloud.largest_component(mask)
        assert out.sum() == 5  # the diagonal counts as one 8-connected blob

    def test_tie_break_row_major(self):
        mask = np.zeros((8, 8), bool)
        mask[0, 0:3] = True
        mask[6, 4:7] = True
        out = cloud.largest_component(mask)
        assert out[0, 0] and not out[6, 4]

    def test_idempotent_and_subset(self):
        rng = np.random.default_rng(4)
        mask = rng.random((40, 40)) < 0.4
        once = cloud.largest_component(mask)
        assert not (once & ~mask).any()
        np.testing.assert_array_equal(cloud.largest_component(once), once)


class TestNearestNeighbors:
    def test_exact_hit(self):
        ref = np.array([[0.0, 0, 0], [5.0, 0, 0]])
        qidx, ridx, dist = cloud.nearest_neighbors(ref, [[5.0, 0, 0]], 1.0)
        assert list(qidx) == [0] and list(ridx) == [1]
        assert dist[0] == 0.0

    def test_max_dist_zero_disjoint(self):
        ref = np.array([[0.0, 0, 0]])
        qidx, _, _ = cloud.nearest_neighbors(ref, [[1.0, 0, 0]], 0.0)
        assert qidx.size == 0

    def test_empty_reference(self):
        with pytest.raises(cloud.EmptyCloudError):
            cloud.nearest_neighbors(np.zeros((0, 3)), [[0.0, 0, 0]], 1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        ref = rng.uniform(0, 100, (5000, 3))
        queries = rng.uniform(0, 100, (1000, 3))
        qidx, ridx, dist = cloud.nearest_neighbors(ref, queries, 5.0)
        full = np.linalg.norm(queries[:, None] - ref[None], axis=-1)
        brute_idx = full.argmin(axis=1)
        brute_dist = full.min(axis=1)
        keep = brute_dist <= 5.0
        np.testing.assert_array_equal(qidx, np.nonzero(keep)[0])
        np.testing.assert_array_equal(ridx, brute_idx[keep])
        np.testing.assert_allclose(dist, brute_dist[keep], atol=1e-9)

    def test_distances_nonincreasing_when_reference_grows(self):
        rng = np.random.default_rng(6)
        small = rng.uniform(0, 50, (200, 3))
        extra = rng.uniform(0, 50, (300, 3))
        queries = rng.uniform(0, 50, (100, 3))
        _, _, d_small = cloud.nearest_neighbors(small, queries, np.inf)
        _, _, d_big = cloud.nearest_neighbors(np.vstack([small, extra]),
                                              queries, np.inf)
        assert (d_big <= d_small + 1e-12).all()


class TestPosteriorVisible:
    def test_sphere_hemisphere(self):
        # density chosen so the 0.5 mm z-buffer grid resolves the samples;
        # denser sampling would cull grazing rim points by design
        rng = np.random.default_rng(7)
        dirs = rng.normal(size=(2000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = 30.0 * dirs
        sel = cloud.select_posterior_visible(pts, dirs, [0.0, 0.0, -1.0])
        # viewer above +z: the n_z > 0 hemisphere is kept
        assert (dirs[sel][:, 2] > 0).all()
        assert sel.size == pytest.approx(1000, rel=0.05)

    def test_plane_facing_viewer(self):
        xs, ys = np.meshgrid(np.linspace(0, 10, 21), np.linspace(0, 10, 21))
        pts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)])
        normals = np.tile([0.0, 0.0, 1.0], (pts.shape[0], 1))
        sel = cloud.select_posterior_visible(pts, normals, [0.0, 0.0, -1.0])
        assert sel.size == pts.shape[0]

    def test_stacked_planes_keep_nearer(self):
        xs, ys = np.meshgrid(np.linspace(0, 10, 21), np.linspace(0, 10, 21))
        near = np.column_stack([xs.ravel(), ys.ravel(), np.full(xs.size, 5.0)])
        far = near.copy()
        far[:, 2] = 0.0
        pts = np.vstack([near, far])
        normals = np.tile([0.0, 0.0, 1.0], (pts.shape[0], 1))
        # viewer at +z looking along -z: larger z is nearer
        sel = cloud.select_posterior_visible(pts, normals, [0.0, 0.0, -1.0])
        assert set(sel) == set(range(near.shape[0]))
