import unittest

import numpy as np
from scipy.spatial.transform import Rotation

from tripose.measurement import (
    MeasurementError,
    MeasurementSet,
    apply_measurement_operator,
    build_A,
    differential_transform,
    extract_measurements,
    measured_locations,
    vec_rotations,
)
from tripose.rot6d import batch_from_sixdof, to_sixdof
from tripose.skeleton import PoseSequence, build_skeleton, default_skeleton, forward_kinematics


def random_poses(frames, seed):
    R = Rotation.random(frames * 22, random_state=seed).as_matrix().reshape(frames, 22, 3, 3)
    root = np.random.default_rng(seed).uniform(-2.0, 2.0, size=(frames, 3))
    return PoseSequence(to_sixdof(R), root)


class ExtractMeasurementsTests(unittest.TestCase):
    def setUp(self):
        self.skeleton = default_skeleton()
        self.poses = random_poses(10, seed=0)

    def test_noiseless(self):
        m = extract_measurements(self.poses, self.skeleton, 0.0, 0.0, seed=1)
        expected = self.poses.locations(self.skeleton)[:, [15, 20, 21]]
        np.testing.assert_array_equal(m.locations, expected)
        np.testing.assert_array_equal(m.rotations, self.poses.rotations[:, [15, 20, 21]])

    def test_location_noise_level(self):
        frames = 20_000
        poses = PoseSequence(
            np.tile([1.0, 0, 0, 0, 1, 0], (frames, 22, 1)), np.zeros((frames, 3))
        )
        clean = extract_measurements(poses, self.skeleton, 0.0, 0.0, seed=2)
        noisy = extract_measurements(poses, self.skeleton, 0.05, 0.0, seed=2)
        spread = np.std((noisy.locations - clean.locations).reshape(-1, 3), axis=0)
        self.assertTrue(np.all((spread >= 0.049) & (spread <= 0.051)), spread)

    def test_same_seed_is_bit_identical(self):
        a = extract_measurements(self.poses, self.skeleton, 0.02, 0.01, seed=7)
        b = extract_measurements(self.poses, self.skeleton, 0.02, 0.01, seed=7)
        np.testing.assert_array_equal(a.locations, b.locations)
        np.testing.assert_array_equal(a.rotations, b.rotations)

    def test_negative_noise(self):
        with self.assertRaises(MeasurementError):
            extract_measurements(self.poses, self.skeleton, -0.1, 0.0, seed=0)

    def test_shape_validation(self):
        with self.assertRaises(MeasurementError):
            MeasurementSet(np.zeros((4, 2, 3)), np.zeros((4, 2, 6)), 0.0, 0.0)

    def test_translated_adds_offset(self):
        m = extract_measurements(self.poses, self.skeleton, 0.0, 0.0, seed=0)
        moved = m.translated(np.array([5.0, -2.0, 7.0]))
        expected = np.broadcast_to([5.0, -2.0, 7.0], (10, 3, 3))
        np.testing.assert_allclose(moved.locations - m.locations, expected)


class LinearOperatorTests(unittest.TestCase):
    def test_single_bone(self):
        skeleton = build_skeleton([-1, 0], [[0, 0, 0], [0, 0, 1]], measured_joints=(1,))
        A = build_A(skeleton)
        identity = vec_rotations(np.broadcast_to(np.eye(3), (2, 3, 3)))
        np.testing.assert_allclose(A.apply(identity)[0], [0.0, 0.0, 1.0])

    def test_three_bone_chain_matches_fk(self):
        rng = np.random.default_rng(0)
        bones = np.vstack([np.zeros(3), rng.uniform(-0.5, 0.5, size=(3, 3))])
        skeleton = build_skeleton([-1, 0, 1, 2], bones, measured_joints=(3,))
        R = Rotation.random(4, random_state=1).as_matrix()
        A = build_A(skeleton)
        expected = forward_kinematics(skeleton, R)[3]
        self.assertLess(np.max(np.abs(A.apply(vec_rotations(R))[0] - expected)), 1e-12)

    def test_linear_in_bones(self):
        skeleton = default_skeleton()
        s = 1.7
        R = Rotation.random(22, random_state=2).as_matrix()
        base = build_A(skeleton).apply(vec_rotations(R))
        scaled = build_A(build_skeleton(skeleton.parents, s * skeleton.bone_vectors)).apply(
            vec_rotations(R)
        )
        np.testing.assert_allclose(scaled, s * base, atol=1e-12)

    def test_matches_fk_at_measured_joints(self):
        skeleton = default_skeleton()
        R = Rotation.random(50 * 22, random_state=3).as_matrix().reshape(50, 22, 3, 3)
        linear = build_A(skeleton).apply(vec_rotations(R))
        direct = forward_kinematics(skeleton, R)[:, [15, 20, 21]]
        self.assertLess(np.max(np.abs(linear - direct)), 1e-12)

    def test_off_chain_bones_do_not_matter(self):
        skeleton = default_skeleton()
        bones = skeleton.bone_vectors.copy()
        bones[10] *= 3.0
        other = build_skeleton(skeleton.parents, bones)
        np.testing.assert_array_equal(build_A(skeleton).matrix, build_A(other).matrix)

    def test_chain_joints(self):
        A = build_A(default_skeleton())
        self.assertEqual(A.chain_joints, (0, 3, 6, 9, 12, 13, 14, 16, 17, 18, 19))
        self.assertEqual(A.output_count, 3)

    def test_unknown_measured_joint(self):
        with self.assertRaises(MeasurementError):
            build_A(default_skeleton(), measured_joints=(15, 30))


class MeasurementOperatorTests(unittest.TestCase):
    def setUp(self):
        self.skeleton = default_skeleton()
        self.A = build_A(self.skeleton)

    def test_identity_gives_rest_pose(self):
        r = np.tile([1.0, 0, 0, 0, 1, 0], (22, 1))
        locations = apply_measurement_operator(self.A, r)
        for m, joint in enumerate((15, 20, 21)):
            expected = self.skeleton.bone_vectors[self.skeleton.chain(joint)].sum(axis=0)
            np.testing.assert_allclose(locations[m], expected, atol=1e-15)

    def test_ground_truth_reproduces_clean_locations(self):
        poses = random_poses(5, seed=4)
        predicted = apply_measurement_operator(self.A, poses.rotations)
        expected = measured_locations(self.skeleton, poses.rotation_matrices())
        self.assertLess(np.max(np.abs(predicted - expected)), 1e-12)

    def test_unconstrained_sixdof_matches_composition(self):
        r = np.random.default_rng(5).standard_normal((8, 22, 6))
        predicted = apply_measurement_operator(self.A, r)
        expected = forward_kinematics(self.skeleton, batch_from_sixdof(r))[:, [15, 20, 21]]
        self.assertLess(np.max(np.abs(predicted - expected)), 1e-12)


class DifferentialTransformTests(unittest.TestCase):
    def test_translation_invariance(self):
        locations = np.random.default_rng(6).standard_normal((10, 3, 3))
        shifted = differential_transform(locations + np.array([5.0, -2.0, 7.0]))
        np.testing.assert_allclose(shifted, differential_transform(locations), atol=1e-12)

    def test_direct_subtraction(self):
        locations = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
        np.testing.assert_array_equal(
            differential_transform(locations), [[1.0, 0, 0], [-1.0, 0, 0]]
        )

    def test_wrong_shape(self):
        with self.assertRaises(MeasurementError):
            differential_transform(np.zeros((4, 2, 3)))

    def test_differential_operator_rows(self):
        A = build_A(default_skeleton())
        R = Rotation.random(10 * 22, random_state=7).as_matrix().reshape(10, 22, 3, 3)
        C = vec_rotations(R)
        lhs = A.to_differential().apply(C)
        rhs = differential_transform(A.apply(C))
        self.assertLess(np.max(np.abs(lhs - rhs)), 1e-12)

    def test_root_cancels(self):
        skeleton = default_skeleton()
        poses = random_poses(10, seed=8)
        with_root = poses.locations(skeleton)[:, [15, 20, 21]]
        A_diff = build_A(skeleton).to_differential()
        lhs = differential_transform(with_root)
        rhs = A_diff.apply(vec_rotations(poses.rotation_matrices()))
        self.assertLess(np.max(np.abs(lhs - rhs)), 1e-12)


if __name__ == "__main__":
    unittest.main()
