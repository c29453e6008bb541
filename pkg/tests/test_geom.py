import math

import numpy as np
import pytest

from vertereg import geom
from vertereg.geom import RigidTransform


def random_transform(rng):
    return RigidTransform(geom.random_unit_quat(rng), rng.normal(0, 50, 3))


class TestGeodesicAngle:
    def test_identity(self):
        q = geom.quat_normalize(np.array([0.3, -0.5, 0.1, 0.8]))
        assert geom.geodesic_angle(q, q) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        a = np.array([1.0, 0, 0, 0])
        b = np.array([0.0, 1, 0, 0])
        assert geom.geodesic_angle(a, b) == pytest.approx(math.pi, abs=1e-12)

    def test_double_cover(self):
        rng = np.random.default_rng(1)
        q = geom.random_unit_quat(rng)
        assert geom.geodesic_angle(q, -q) == pytest.approx(0.0, abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            geom.geodesic_angle(np.zeros(4), np.array([1.0, 0, 0, 0]))

    def test_symmetric_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b = geom.random_unit_quat(rng), geom.random_unit_quat(rng)
            ab = geom.geodesic_angle(a, b)
            assert ab == pytest.approx(geom.geodesic_angle(b, a), abs=1e-12)
            assert 0.0 <= ab <= math.pi

    def test_z_rotation_distance(self):
        rng = np.random.default_rng(3)
        for alpha in (-3.0, -1.2, 0.0, 0.4, 2.9, math.pi):
            q = geom.random_unit_quat(rng)
            rotated = geom.quat_mul(geom.z_rotation_quat(alpha), q)
            assert geom.geodesic_angle(q, rotated) == pytest.approx(abs(alpha), abs=1e-9)


class TestNormPenalty:
    def test_unit(self):
        assert geom.norm_penalty(np.array([1.0, 0, 0, 0])) == pytest.approx(0.0, abs=1e-15)

    def test_norm_two(self):
        assert geom.norm_penalty(np.array([2.0, 0, 0, 0])) == pytest.approx(1.0, abs=1e-15)

    def test_zero(self):
        assert geom.norm_penalty(np.zeros(4)) == pytest.approx(1.0, abs=1e-15)


class TestZRotation:
    def test_zero(self):
        np.testing.assert_allclose(geom.z_rotation_quat(0.0), [1, 0, 0, 0], atol=1e-15)

    def test_pi(self):
        np.testing.assert_allclose(geom.z_rotation_quat(math.pi), [0, 0, 0, 1], atol=1e-15)

    def test_composition_adds_angles(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a, b = rng.uniform(-1.5, 1.5, size=2)
            lhs = geom.quat_mul(geom.z_rotation_quat(a), geom.z_rotation_quat(b))
            np.testing.assert_allclose(lhs, geom.z_rotation_quat(a + b), atol=1e-12)


class TestUmeyama:
    def test_identity(self):
        rng = np.random.default_rng(5)
        src = rng.normal(0, 10, (8, 3))
        t = geom.umeyama(src, src)
        angle, dist = geom.pose_difference(t, RigidTransform.identity())
        assert angle < 1e-9 and dist < 1e-9

    def test_recovers_known_transform(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            t_known = random_transform(rng)
            src = rng.normal(0, 30, (10, 3))
            recovered = geom.umeyama(src, t_known.apply(src))
            angle, dist = geom.pose_difference(t_known, recovered)
            assert angle < 1e-9
            assert dist < 1e-9

    def test_collinear_rejected(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
        with pytest.raises(geom.DegenerateConfigurationError):
            geom.umeyama(pts, pts + 1.0)

    def test_too_few_points(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0]])
        with pytest.raises(geom.DegenerateConfigurationError):
            geom.umeyama(pts, pts)

    def test_reflection_corrected(self):
        # a noisy near-planar set must still give a proper rotation
        rng = np.random.default_rng(7)
        src = rng.normal(0, 10, (20, 3))
        src[:, 2] *= 1e-6
        t_known = random_transform(rng)
        recovered = geom.umeyama(src, t_known.apply(src))
        assert np.linalg.det(geom.quat_to_matrix(recovered.q)) == pytest.approx(1.0, abs=1e-9)

    def test_conjugation_invariance(self):
        rng = np.random.default_rng(8)
        src = rng.normal(0, 20, (12, 3))
        dst = random_transform(rng).apply(src) + rng.normal(0, 0.5, src.shape)
        g = random_transform(rng)
        base = geom.umeyama(src, dst)
        conj = geom.umeyama(g.apply(src), g.apply(dst))
        expected = g.compose(base).compose(g.inverse())
        angle, dist = geom.pose_difference(conj, expected)
        assert angle < 1e-9 and dist < 1e-9


class TestRigidTransform:
    def test_compose_then_invert_is_identity(self):
        rng = np.random.default_rng(9)
        t = random_transform(rng)
        angle, dist = geom.pose_difference(t.compose(t.inverse()),
                                           RigidTransform.identity())
        assert angle < 1e-9 and dist < 1e-9

    def test_apply_identity(self):
        p = np.array([3.0, -4.0, 5.0])
        np.testing.assert_array_equal(RigidTransform.identity().apply(p), p)

    def test_compose_matches_sequential_apply(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            a, b = random_transform(rng), random_transform(rng)
            p = rng.normal(0, 30, 3)
            np.testing.assert_allclose(a.compose(b).apply(p),
                                       a.apply(b.apply(p)), atol=1e-9)

    def test_inverse_of_composition(self):
        rng = np.random.default_rng(11)
        a, b = random_transform(rng), random_transform(rng)
        lhs = a.compose(b).inverse()
        rhs = b.inverse().compose(a.inverse())
        angle, dist = geom.pose_difference(lhs, rhs)
        assert angle < 1e-9 and dist < 1e-9

    def test_preserves_pairwise_distances(self):
        rng = np.random.default_rng(12)
        t = random_transform(rng)
        pts = rng.normal(0, 40, (30, 3))
        mapped = t.apply(pts)
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        d1 = np.linalg.norm(mapped[:, None] - mapped[None], axis=-1)
        np.testing.assert_allclose(d0, d1, atol=1e-9)

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            t = random_transform(rng)
            back = RigidTransform.from_matrix(t.matrix())
            assert geom.geodesic_angle(t.q, back.q) < 1e-9
            np.testing.assert_allclose(t.t, back.t, atol=1e-12)

    def test_normalize(self):
        t = RigidTransform(np.array([2.0, 0, 0, 0]), np.zeros(3)).normalized()
        np.testing.assert_allclose(t.q, [1, 0, 0, 0], atol=1e-15)


class TestHemisphereAlign:
    def test_flips_negative_dot(self):
        q = np.array([1.0, 0, 0, 0])
        np.testing.assert_array_equal(geom.hemisphere_align(q, -q), q)

    def test_keeps_positive_dot(self):
        rng = np.random.default_rng(14)
        q = geom.random_unit_quat(rng)
        np.testing.assert_array_equal(geom.hemisphere_align(q, q), q)
