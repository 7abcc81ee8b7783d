"""Projection chain, poses and quaternion utilities.

Oracle: independent 4x4 homogeneous matrix chains (and scipy's Rotation for
quaternion conversions), evaluated without going through the Pose class.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from rstab.geometry import (
    Intrinsics,
    Pose,
    project,
    project_world,
    quat_angle,
    quat_from_matrix,
    quat_from_rotvec,
    quat_mul,
    quat_normalize,
    quat_to_matrix,
    relative,
    unproject,
)

K = Intrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)


def random_pose(rng):
    q = quat_normalize(rng.standard_normal(4))
    return Pose(q, rng.standard_normal(3))


def oracle_matrix(pose):
    """4x4 camera-to-world matrix built from scipy, not from Pose."""
    m = np.eye(4)
    w, x, y, z = pose.rotation
    m[:3, :3] = Rotation.from_quat([x, y, z, w]).as_matrix()
    m[:3, 3] = pose.translation
    return m


def oracle_project(x, depth, src, dst, k):
    """Matrix-chain reprojection: K_norm^-1 lift, world transfer, pinhole."""
    cam = np.array([(x[0] - k.cx) / k.fx * depth, (x[1] - k.cy) / k.fy * depth,
                    depth, 1.0])
    world = oracle_matrix(src) @ cam
    cam2 = np.linalg.inv(oracle_matrix(dst)) @ world
    z = cam2[2]
    return np.array([k.fx * cam2[0] / z + k.cx, k.fy * cam2[1] / z + k.cy]), z


class TestQuaternions:
    def test_unit_norm_after_normalize(self, rng):
        for _ in range(50):
            q = quat_normalize(rng.standard_normal(4))
            assert abs(np.linalg.norm(q) - 1.0) < 1e-12

    def test_matrix_round_trip(self, rng):
        for _ in range(100):
            q = quat_normalize(rng.standard_normal(4))
            if q[0] < 0:
                q = -q
            q2 = quat_from_matrix(quat_to_matrix(q))
            assert np.allclose(q, q2, atol=1e-9)

    def test_to_matrix_matches_scipy(self, rng):
        for _ in range(100):
            q = quat_normalize(rng.standard_normal(4))
            ref = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
            assert np.allclose(quat_to_matrix(q), ref, atol=1e-12)

    def test_mul_matches_matrix_product(self, rng):
        for _ in range(50):
            a = quat_normalize(rng.standard_normal(4))
            b = quat_normalize(rng.standard_normal(4))
            m = quat_to_matrix(quat_mul(a, b))
            assert np.allclose(m, quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)

    def test_from_rotvec_matches_scipy(self, rng):
        for _ in range(50):
            rv = rng.standard_normal(3)
            q = quat_from_rotvec(rv)
            ref = Rotation.from_rotvec(rv).as_quat()  # x, y, z, w
            refq = np.array([ref[3], ref[0], ref[1], ref[2]])
            if refq[0] * q[0] < 0:
                refq = -refq
            assert np.allclose(q, refq, atol=1e-9)

    def test_angle(self):
        q = quat_from_rotvec(np.array([0.0, 0.3, 0.0]))
        assert abs(quat_angle(q) - 0.3) < 1e-12


class TestPose:
    def test_identity_round_trip(self, rng):
        p = random_pose(rng)
        ident = p.compose(p.inverse())
        assert np.allclose(ident.rot_matrix(), np.eye(3), atol=1e-9)
        assert np.allclose(ident.translation, 0.0, atol=1e-9)

    def test_apply_matches_matrix(self, rng):
        p = random_pose(rng)
        pts = rng.standard_normal((10, 3))
        m = oracle_matrix(p)
        ref = pts @ m[:3, :3].T + m[:3, 3]
        assert np.allclose(p.apply(pts), ref, atol=1e-12)
        back = (pts - m[:3, 3]) @ m[:3, :3]
        assert np.allclose(p.apply_inverse(pts), back, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Pose(np.array([1.0, 0, 0, np.nan]), np.zeros(3))


class TestRelative:
    def test_self_is_identity(self, rng):
        p = random_pose(rng)
        r = relative(p, p)
        assert np.allclose(r.rot_matrix(), np.eye(3), atol=1e-9)
        assert np.allclose(r.translation, 0.0, atol=1e-9)

    def test_identity_to_translation(self):
        t = np.array([1.0, -2.0, 3.0])
        r = relative(Pose.identity(), Pose(np.array([1.0, 0, 0, 0]), t))
        assert np.allclose(r.apply(np.zeros(3)), t, atol=1e-12)

    def test_matches_matrix_oracle(self, rng):
        # relative(a, b) is b o a^-1 as rigid transforms
        for _ in range(20):
            a, b = random_pose(rng), random_pose(rng)
            ref = oracle_matrix(b) @ np.linalg.inv(oracle_matrix(a))
            assert np.allclose(relative(a, b).matrix(), ref, atol=1e-9)

    def test_composition_chain(self, rng):
        a, b, c = (random_pose(rng) for _ in range(3))
        lhs = relative(a, c)
        rhs = relative(b, c).compose(relative(a, b))
        assert np.allclose(lhs.matrix(), rhs.matrix(), atol=1e-9)


class TestUnproject:
    def test_principal_ray(self):
        p = Pose.identity()
        pt = unproject(np.array([K.cx, K.cy]), 4.0, p, K)
        assert np.allclose(pt, [0.0, 0.0, 4.0], atol=1e-12)

    def test_unit_focal_example(self):
        k = Intrinsics(1.0, 1.0, 0.0, 0.0, 10, 10)
        pt = unproject(np.array([2.0, 3.0]), 4.0, Pose.identity(), k)
        assert np.allclose(pt, [8.0, 12.0, 4.0], atol=1e-12)

    def test_rejects_nonpositive_depth(self):
        with pytest.raises(ValueError):
            unproject(np.array([1.0, 1.0]), 0.0, Pose.identity(), K)

    def test_round_trip(self, rng):
        p = random_pose(rng)
        for _ in range(100):
            x = rng.uniform(0, 63, size=2)
            d = rng.uniform(0.5, 10.0)
            world = unproject(x, d, p, K)
            uv, z, valid = project_world(world, p, K)
            assert valid
            assert np.allclose(uv, x, atol=1e-9)
            assert abs(z - d) < 1e-9 * d


class TestProject:
    def test_identity_transform(self):
        p = Pose.identity()
        uv, z, valid = project(np.array([10.5, 20.0]), 3.0, p, p, K)
        assert valid
        assert np.allclose(uv, [10.5, 20.0], atol=1e-12)
        assert abs(z - 3.0) < 1e-12

    def test_stereo_baseline_shift(self):
        # camera translated along +x by b sees a fronto-parallel point
        # shifted by -fx b / depth
        src = Pose.identity()
        dst = Pose(np.array([1.0, 0, 0, 0]), np.array([0.1, 0.0, 0.0]))
        uv, z, valid = project(np.array([32.0, 32.0]), 2.0, src, dst, K)
        assert valid
        assert abs(uv[0] - (32.0 - 100.0 * 0.1 / 2.0)) < 1e-9
        assert abs(uv[1] - 32.0) < 1e-9
        assert abs(z - 2.0) < 1e-12

    def test_behind_camera_invalid(self):
        src = Pose.identity()
        # target camera ahead of the point, looking the same way
        dst = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 5.0]))
        _, _, valid = project(np.array([32.0, 32.0]), 2.0, src, dst, K)
        assert not valid

    def test_matches_matrix_oracle(self, rng):
        for _ in range(200):
            src, dst = random_pose(rng), random_pose(rng)
            x = rng.uniform(0, 63, size=2)
            d = rng.uniform(0.5, 10.0)
            ref_uv, ref_z = oracle_project(x, d, src, dst, K)
            uv, z, valid = project(x, d, src, dst, K)
            assert valid == (ref_z > 0)
            if valid:
                assert np.allclose(uv, ref_uv, atol=1e-6)
                assert abs(z - ref_z) < 1e-9 * abs(ref_z)

    def test_world_frame_equivariance(self, rng):
        # moving both cameras by the same rigid transform leaves the
        # reprojected pixel unchanged
        for _ in range(50):
            src, dst, g = (random_pose(rng) for _ in range(3))
            x = rng.uniform(10, 50, size=2)
            d = rng.uniform(1.0, 5.0)
            uv1, _, v1 = project(x, d, src, dst, K)
            uv2, _, v2 = project(x, d, g.compose(src), g.compose(dst), K)
            assert v1 == v2
            if v1:
                assert np.allclose(uv1, uv2, atol=1e-6)

    def test_batched_matches_single(self, rng):
        src, dst = random_pose(rng), random_pose(rng)
        xs = rng.uniform(0, 63, size=(32, 2))
        ds = rng.uniform(0.5, 8.0, size=32)
        uv_b, z_b, val_b = project(xs, ds, src, dst, K)
        for i in range(32):
            uv, z, valid = project(xs[i], ds[i], src, dst, K)
            assert valid == val_b[i]
            if valid:
                assert np.allclose(uv, uv_b[i], atol=1e-12)
                assert abs(z - z_b[i]) < 1e-12


class TestIntrinsics:
    def test_validation(self):
        with pytest.raises(ValueError):
            Intrinsics(-1.0, 1.0, 0.0, 0.0, 4, 4)
        with pytest.raises(ValueError):
            Intrinsics(1.0, 1.0, 9.0, 0.0, 4, 4)

    def test_matrix(self):
        m = K.matrix()
        assert m[0, 0] == K.fx and m[1, 1] == K.fy
        assert m[0, 2] == K.cx and m[1, 2] == K.cy and m[2, 2] == 1.0
