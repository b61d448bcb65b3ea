import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from vidprobe import geometry as geo
from vidprobe.tensorstore import SceneAnnotation


def random_rotation(rng):
    return Rotation.random(random_state=np.random.RandomState(rng.integers(2**31))).as_matrix()


class TestQuaternions:
    def test_round_trip_against_scipy(self, rng):
        for _ in range(200):
            R = random_rotation(rng)
            q = geo.matrix_to_quat(R)
            assert q[0] >= 0
            assert abs(np.linalg.norm(q) - 1) < 1e-12
            np.testing.assert_allclose(geo.quat_to_matrix(q), R, atol=1e-12)
            # scipy uses [x, y, z, w] ordering; compare up to global sign
            q_ref = Rotation.from_matrix(R).as_quat()
            q_ref = np.concatenate([q_ref[3:], q_ref[:3]])
            if q_ref[0] < 0:
                q_ref = -q_ref
            np.testing.assert_allclose(q, q_ref, atol=1e-9)

    def test_near_180_degrees(self, rng):
        # the max-diagonal branch must stay stable where trace approaches -1
        for axis in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0.3, -0.7, 0.648])):
            R = geo.rotation_from_axis_angle(axis, math.radians(179.999))
            q = geo.matrix_to_quat(R)
            np.testing.assert_allclose(geo.quat_to_matrix(q), R, atol=1e-9)

    def test_encode_decode_pose(self, rng):
        # fidelity measured with scipy's rotvec magnitude: it resolves angles
        # below the arccos-of-trace round-off floor
        for _ in range(50):
            pose = geo.PoseSE3(random_rotation(rng), rng.standard_normal(3))
            enc = geo.encode_pose(pose)
            assert enc.shape == (7,)
            back = geo.decode_pose(enc)
            residual = Rotation.from_matrix(back.R.T @ pose.R).magnitude()
            assert math.degrees(residual) <= 1e-6
            np.testing.assert_allclose(back.t, pose.t, atol=1e-12)

    def test_rodrigues_matches_scipy(self, rng):
        for _ in range(50):
            axis = rng.standard_normal(3)
            angle = rng.uniform(0, 2 * math.pi)
            R = geo.rotation_from_axis_angle(axis, angle)
            R_ref = Rotation.from_rotvec(angle * axis / np.linalg.norm(axis)).as_matrix()
            np.testing.assert_allclose(R, R_ref, atol=1e-12)


class TestUmeyama:
    def test_identity_on_unit_cube(self):
        cube = np.array(
            [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=float
        )
        sim = geo.umeyama_align(cube, cube)
        assert abs(sim.s - 1) < 1e-12
        np.testing.assert_allclose(sim.R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(sim.t, 0, atol=1e-12)

    def test_recovers_constructed_similarity(self, rng):
        src = rng.standard_normal((50, 3))
        R0 = random_rotation(rng)
        t0 = np.array([1.0, -2.0, 3.0])
        dst = 2.5 * src @ R0.T + t0
        sim = geo.umeyama_align(src, dst)
        assert abs(sim.s - 2.5) < 1e-9
        np.testing.assert_allclose(sim.R, R0, atol=1e-9)
        np.testing.assert_allclose(sim.t, t0, atol=1e-9)
        residual = np.linalg.norm(sim.apply(src) - dst, axis=1).mean()
        assert residual <= 1e-9

    def test_beats_random_perturbations(self, rng):
        src = rng.standard_normal((40, 3))
        dst = 1.7 * src @ random_rotation(rng).T + rng.standard_normal(3) + 0.01 * rng.standard_normal((40, 3))
        sim = geo.umeyama_align(src, dst)
        base = ((sim.apply(src) - dst) ** 2).sum()
        for _ in range(100):
            ds = sim.s * (1 + 0.02 * rng.standard_normal())
            dR = sim.R @ geo.rotation_from_axis_angle(rng.standard_normal(3), 0.02 * rng.standard_normal())
            dt = sim.t + 0.02 * rng.standard_normal(3)
            perturbed = ((ds * src @ dR.T + dt - dst) ** 2).sum()
            assert perturbed >= base - 1e-12

    def test_rigid_mode_pins_scale(self, rng):
        src = rng.standard_normal((20, 3))
        dst = 3.0 * src
        sim = geo.umeyama_align(src, dst, with_scale=False)
        assert sim.s == 1.0

    def test_permutation_invariance(self, rng):
        src = rng.standard_normal((25, 3))
        dst = src @ random_rotation(rng).T + 0.05 * rng.standard_normal((25, 3))
        sim = geo.umeyama_align(src, dst)
        perm = rng.permutation(25)
        sim_p = geo.umeyama_align(src[perm], dst[perm])
        assert sim.s == sim_p.s
        np.testing.assert_array_equal(sim.R, sim_p.R)
        np.testing.assert_array_equal(sim.t, sim_p.t)

    def test_degenerate_inputs(self, rng):
        with pytest.raises(geo.DegenerateConfigurationError):
            geo.umeyama_align(np.zeros((2, 3)), np.zeros((2, 3)))
        coincident = np.ones((5, 3))
        with pytest.raises(geo.DegenerateConfigurationError):
            geo.umeyama_align(coincident, rng.standard_normal((5, 3)))
        bad = rng.standard_normal((5, 3))
        bad[0, 0] = np.nan
        with pytest.raises(geo.DegenerateConfigurationError):
            geo.umeyama_align(bad, rng.standard_normal((5, 3)))

    def test_reflection_not_produced(self, rng):
        # mirrored targets must still yield a proper rotation (det +1)
        src = rng.standard_normal((30, 3))
        dst = src.copy()
        dst[:, 2] *= -1
        sim = geo.umeyama_align(src, dst)
        assert abs(np.linalg.det(sim.R) - 1) < 1e-9


class TestGeodesic:
    def test_trivial_cases(self):
        assert geo.so3_geodesic_deg(np.eye(3), np.eye(3)) == 0
        Rz90 = geo.rotation_from_axis_angle([0, 0, 1], math.pi / 2)
        assert abs(geo.so3_geodesic_deg(np.eye(3), Rz90) - 90) < 1e-9

    def test_matches_axis_angle_construction(self, rng):
        for _ in range(100):
            R = random_rotation(rng)
            axis = rng.standard_normal(3)
            phi = rng.uniform(0.01, 179.9)
            R2 = R @ geo.rotation_from_axis_angle(axis, math.radians(phi))
            assert abs(geo.so3_geodesic_deg(R, R2) - phi) <= 1e-9

    def test_symmetry_and_bi_invariance(self, rng):
        for _ in range(50):
            R1, R2, Q = (random_rotation(rng) for _ in range(3))
            d = geo.so3_geodesic_deg(R1, R2)
            assert abs(d - geo.so3_geodesic_deg(R2, R1)) <= 1e-9
            assert abs(d - geo.so3_geodesic_deg(Q @ R1, Q @ R2)) <= 1e-9

    def test_rejects_non_rotation(self):
        with pytest.raises(geo.InvariantViolationError):
            geo.so3_geodesic_deg(np.eye(3) * 2, np.eye(3))


class TestTranslationAngle:
    def test_trivial_angles(self):
        deg, excluded = geo.translation_angle_deg([1, 0, 0], [1, 0, 0])
        assert deg == 0 and not excluded
        deg, excluded = geo.translation_angle_deg([1, 0, 0], [0, 1, 0])
        assert abs(deg - 90) < 1e-12 and not excluded

    def test_degenerate_baseline_excluded(self):
        deg, excluded = geo.translation_angle_deg([1, 0, 0], [0, 0, 0], eps=1e-5)
        assert excluded

    def test_degenerate_prediction_is_maximal(self):
        deg, excluded = geo.translation_angle_deg([0, 0, 0], [1, 0, 0], eps=1e-5)
        assert deg == 180 and not excluded

    @settings(max_examples=50, deadline=None)
    @given(
        scale1=st.floats(0.01, 100),
        scale2=st.floats(0.01, 100),
        seed=st.integers(0, 2**16),
    )
    def test_positive_rescaling_invariance(self, scale1, scale2, seed):
        r = np.random.default_rng(seed)
        t1, t2 = r.standard_normal(3), r.standard_normal(3)
        base, _ = geo.translation_angle_deg(t1, t2)
        scaled, _ = geo.translation_angle_deg(scale1 * t1, scale2 * t2)
        assert abs(base - scaled) < 1e-9


class TestRelativePose:
    def test_trivial(self, rng):
        g = geo.PoseSE3(random_rotation(rng), rng.standard_normal(3))
        rel = geo.relative_pose(g, g)
        np.testing.assert_allclose(rel.matrix, np.eye(4), atol=1e-12)
        rel = geo.relative_pose(geo.PoseSE3.identity(), g)
        np.testing.assert_allclose(rel.matrix, g.matrix, atol=1e-12)

    def test_composition_identity(self, rng):
        for _ in range(20):
            gi, gj, gk = (geo.PoseSE3(random_rotation(rng), rng.standard_normal(3)) for _ in range(3))
            g_ij = geo.relative_pose(gi, gj)
            g_jk = geo.relative_pose(gj, gk)
            g_ik = geo.relative_pose(gi, gk)
            np.testing.assert_allclose(g_jk.compose(g_ij).matrix, g_ik.matrix, atol=1e-12)


def _boxy_annotation(scale=1.0, frame_count=2, h=3, w=3):
    rng = np.random.default_rng(9)
    depth = rng.uniform(1.0, 2.0, size=(frame_count, h, w)) * scale
    mask = np.ones((frame_count, h, w), dtype=bool)
    mask[0, 0, 0] = False
    depth[0, 0, 0] = 0
    points = rng.standard_normal((frame_count, h, w, 3)) * scale
    poses = np.tile(np.eye(4), (frame_count, 1, 1))
    poses[1, :3, 3] = [0.1 * scale, 0, 0]
    return SceneAnnotation(
        points=points,
        depth=depth,
        conf=mask.astype(float),
        mask=mask,
        poses=poses,
        intrinsics=np.tile(np.array([3.0, 3.0, 1.0, 1.0]), (frame_count, 1)),
    )


class TestNormalizeScene:
    def test_unit_scene_unchanged(self):
        ann = _boxy_annotation()
        norm1, s1 = geo.normalize_scene(ann)
        norm2, s2 = geo.normalize_scene(norm1)
        assert abs(s2 - 1.0) < 1e-9
        np.testing.assert_allclose(norm2.points, norm1.points, atol=1e-12)

    def test_scaling_then_normalizing_cancels(self):
        plain, s_plain = geo.normalize_scene(_boxy_annotation(scale=1.0))
        scaled, s_scaled = geo.normalize_scene(_boxy_annotation(scale=7.0))
        assert abs(s_scaled - 7.0 * s_plain) < 1e-9
        np.testing.assert_allclose(scaled.points, plain.points, atol=1e-9)
        np.testing.assert_allclose(scaled.depth, plain.depth, atol=1e-9)
        np.testing.assert_allclose(scaled.poses, plain.poses, atol=1e-9)

    def test_three_four_five(self):
        ann = _boxy_annotation()
        ann.mask[:] = False
        ann.mask[0, 1, 1] = True
        ann.points[0, 1, 1] = [0.0, 3.0, 4.0]
        ann.depth[0, 1, 1] = 1.0
        _, s = geo.normalize_scene(ann)
        assert abs(s - 5.0) < 1e-12

    def test_mean_norm_is_one_after(self):
        norm, _ = geo.normalize_scene(_boxy_annotation(scale=3.3))
        mean = np.linalg.norm(norm.points[norm.mask], axis=-1).mean()
        assert abs(mean - 1.0) <= 1e-6

    def test_empty_scene(self):
        ann = _boxy_annotation()
        ann.mask[:] = False
        with pytest.raises(geo.EmptySceneError):
            geo.normalize_scene(ann)


class TestPinhole:
    K = np.array([5.0, 5.0, 2.0, 2.0])

    def test_principal_point_unit_depth(self):
        depth = np.ones((5, 5))
        pts = geo.unproject_depth(depth, self.K, geo.PoseSE3.identity())
        np.testing.assert_allclose(pts[2, 2], [0, 0, 1], atol=1e-12)

    def test_project_unproject_round_trip(self, rng):
        pose = geo.PoseSE3(random_rotation(rng), rng.standard_normal(3))
        depth = rng.uniform(1.0, 4.0, size=(6, 7))
        pts = geo.unproject_depth(depth, self.K, pose)
        uv, z = geo.project_points(pts, self.K, pose)
        jj, ii = np.meshgrid(np.arange(7, dtype=float), np.arange(6, dtype=float))
        np.testing.assert_allclose(z, depth, atol=1e-9)
        np.testing.assert_allclose(uv[..., 0], jj, atol=1e-9)
        np.testing.assert_allclose(uv[..., 1], ii, atol=1e-9)

    def test_translated_pose_shifts_points(self, rng):
        depth = rng.uniform(1.0, 2.0, size=(4, 4))
        base = geo.unproject_depth(depth, self.K, geo.PoseSE3.identity())
        shift = np.array([0.3, -0.2, 0.5])
        pose = geo.PoseSE3(np.eye(3), shift)
        moved = geo.unproject_depth(depth, self.K, pose)
        np.testing.assert_allclose(moved, base - shift, atol=1e-12)

    def test_reproject_identity(self):
        pix, z = geo.reproject_pixel((1.0, 3.0), 2.0, self.K, self.K, geo.PoseSE3.identity())
        np.testing.assert_allclose(pix, [1.0, 3.0], atol=1e-12)
        assert abs(z - 2.0) < 1e-12

    def test_reproject_z_translation(self):
        # moving camera B 0.5 toward the scene reduces transferred depth by 0.5
        g_ab = geo.PoseSE3(np.eye(3), np.array([0.0, 0.0, -0.5]))
        pix, z = geo.reproject_pixel((2.0, 2.0), 2.0, self.K, self.K, g_ab)
        assert abs(z - 1.5) < 1e-12
        np.testing.assert_allclose(pix, [2.0, 2.0], atol=1e-12)

    def test_reproject_consistent_with_unproject(self, rng):
        g_a = geo.PoseSE3(random_rotation(rng), 0.2 * rng.standard_normal(3))
        g_b = geo.PoseSE3(random_rotation(rng), 0.2 * rng.standard_normal(3))
        depth = rng.uniform(2.0, 3.0, size=(5, 5))
        pts = geo.unproject_depth(depth, self.K, g_a)
        uv_expect, z_expect = geo.project_points(pts, self.K, g_b)
        g_ab = geo.relative_pose(g_a, g_b)
        for i in range(5):
            for j in range(5):
                pix, z = geo.reproject_pixel((j, i), depth[i, j], self.K, self.K, g_ab)
                np.testing.assert_allclose(pix, uv_expect[i, j], atol=1e-9)
                assert abs(z - z_expect[i, j]) < 1e-9
