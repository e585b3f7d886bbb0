import unittest

import numpy as np
from scipy.spatial.transform import Rotation

from tripose.rot6d import rotation_about_axis, to_sixdof
from tripose.skeleton import (
    JOINT_COUNT,
    LOWER_BODY_JOINTS,
    MEASURED_JOINTS,
    SMPL_PARENTS,
    UPPER_BODY_JOINTS,
    PoseSequence,
    SkeletonError,
    build_skeleton,
    default_skeleton,
    forward_kinematics,
    recover_root_translation,
    scale_skeleton,
    skeleton_from_document,
)


def unit_bones():
    bones = np.tile([0.0, 1.0, 0.0], (JOINT_COUNT, 1))
    bones[0] = 0.0
    return bones


def recursive_fk(skeleton, rotations, root):
    """Reference descent from the root, independent of index order."""
    children = {j: [] for j in range(skeleton.joint_count)}
    for j, p in enumerate(skeleton.parents):
        if p >= 0:
            children[p].append(j)
    out = np.zeros((skeleton.joint_count, 3))

    def visit(joint, location):
        out[joint] = location
        for child in children[joint]:
            visit(child, location + rotations[joint] @ skeleton.bone_vectors[child])

    visit(0, np.asarray(root, dtype=np.float64))
    return out


class BuildSkeletonTests(unittest.TestCase):
    def test_smpl_tree_with_unit_bones(self):
        skeleton = build_skeleton(SMPL_PARENTS, unit_bones())
        self.assertEqual(skeleton.joint_count, 22)
        self.assertEqual(skeleton.measured_joints, MEASURED_JOINTS)
        self.assertEqual(skeleton.chain(15), [0, 3, 6, 9, 12, 15])

    def test_self_parent_is_a_cycle(self):
        parents = list(SMPL_PARENTS)
        parents[3] = 3
        with self.assertRaisesRegex(SkeletonError, "cycle detected"):
            build_skeleton(parents, unit_bones())

    def test_two_sentinels(self):
        parents = list(SMPL_PARENTS)
        parents[5] = -1
        with self.assertRaisesRegex(SkeletonError, "multiple roots"):
            build_skeleton(parents, unit_bones())

    def test_parent_after_child(self):
        parents = list(SMPL_PARENTS)
        parents[4] = 6
        with self.assertRaisesRegex(SkeletonError, ">= child index 4"):
            build_skeleton(parents, unit_bones())

    def test_nonzero_root_bone(self):
        bones = unit_bones()
        bones[0] = [0.0, 0.1, 0.0]
        with self.assertRaisesRegex(SkeletonError, "root bone"):
            build_skeleton(SMPL_PARENTS, bones)

    def test_measured_joint_outside_tree(self):
        with self.assertRaisesRegex(SkeletonError, "not in tree"):
            build_skeleton(SMPL_PARENTS, unit_bones(), measured_joints=(15, 20, 40))

    def test_document_round_trip(self):
        skeleton = default_skeleton()
        again = skeleton_from_document(skeleton.to_document())
        self.assertEqual(again.parents, skeleton.parents)
        np.testing.assert_array_equal(again.bone_vectors, skeleton.bone_vectors)

    def test_default_skeleton(self):
        skeleton = default_skeleton()
        self.assertEqual(skeleton.parents, SMPL_PARENTS)
        np.testing.assert_array_equal(skeleton.bone_vectors[0], np.zeros(3))
        self.assertEqual(skeleton.measured_joints, (15, 20, 21))

    def test_body_partition(self):
        self.assertEqual(len(UPPER_BODY_JOINTS), 13)
        self.assertEqual(len(LOWER_BODY_JOINTS), 9)
        self.assertEqual(sorted(UPPER_BODY_JOINTS + LOWER_BODY_JOINTS), list(range(22)))


class ForwardKinematicsTests(unittest.TestCase):
    def setUp(self):
        self.skeleton = default_skeleton()
        self.rotations = Rotation.random(22, random_state=0).as_matrix()

    def test_identity_rotations_sum_bones_along_chain(self):
        locations = forward_kinematics(self.skeleton, np.broadcast_to(np.eye(3), (22, 3, 3)))
        for j in range(22):
            expected = self.skeleton.bone_vectors[self.skeleton.chain(j)].sum(axis=0)
            np.testing.assert_allclose(locations[j], expected, atol=1e-15)

    def test_two_joint_chain(self):
        skeleton = build_skeleton([-1, 0], [[0, 0, 0], [0, 0, 1]], measured_joints=(1,))
        rotations = np.stack([rotation_about_axis("x", 90.0), np.eye(3)])
        locations = forward_kinematics(skeleton, rotations)
        np.testing.assert_allclose(locations[1], [0.0, -1.0, 0.0], atol=1e-15)

    def test_matches_recursive_descent(self):
        root = np.array([0.3, 0.9, -1.2])
        expected = recursive_fk(self.skeleton, self.rotations, root)
        actual = forward_kinematics(self.skeleton, self.rotations, root)
        self.assertLess(np.max(np.abs(actual - expected)), 1e-12)

    def test_translation_equivariance(self):
        t = np.array([1.5, -0.25, 4.0])
        moved = forward_kinematics(self.skeleton, self.rotations, t)
        still = forward_kinematics(self.skeleton, self.rotations)
        self.assertLess(np.max(np.abs(moved - (still + t))), 1e-12)

    def test_bone_lengths_preserved(self):
        R = Rotation.random(20 * 22, random_state=1).as_matrix().reshape(20, 22, 3, 3)
        locations = forward_kinematics(self.skeleton, R)
        parents = list(self.skeleton.parents[1:])
        observed = np.linalg.norm(locations[:, 1:] - locations[:, parents], axis=-1)
        np.testing.assert_allclose(
            observed, np.broadcast_to(self.skeleton.bone_lengths()[1:], observed.shape), atol=1e-9
        )

    def test_scaling_commutes(self):
        c = 1.3
        t = np.array([0.2, 1.0, -0.4])
        scaled = scale_skeleton(self.skeleton, c)
        lhs = forward_kinematics(scaled, self.rotations, c * t)
        rhs = c * forward_kinematics(self.skeleton, self.rotations, t)
        self.assertLess(np.max(np.abs(lhs - rhs)), 1e-9)


class ScaleSkeletonTests(unittest.TestCase):
    def test_unit_factors(self):
        skeleton = default_skeleton()
        again = scale_skeleton(skeleton, np.ones(22))
        np.testing.assert_array_equal(again.bone_vectors, skeleton.bone_vectors)
        self.assertEqual(again.parents, skeleton.parents)

    def test_uniform_scale_scales_locations(self):
        skeleton = default_skeleton()
        s = 0.6
        identity = np.broadcast_to(np.eye(3), (22, 3, 3))
        root = np.array([0.0, 0.9, 0.0])
        scaled = forward_kinematics(scale_skeleton(skeleton, s), identity, s * root)
        np.testing.assert_allclose(scaled, s * forward_kinematics(skeleton, identity, root))

    def test_non_positive_factor(self):
        factors = np.ones(22)
        factors[9] = 0.0
        with self.assertRaisesRegex(SkeletonError, "bone 9"):
            scale_skeleton(default_skeleton(), factors)

    def test_wrong_factor_count(self):
        with self.assertRaises(SkeletonError):
            scale_skeleton(default_skeleton(), np.ones(21))


class RootRecoveryTests(unittest.TestCase):
    def setUp(self):
        self.skeleton = default_skeleton()
        self.rotations = Rotation.random(22, random_state=2).as_matrix()
        self.root = np.array([1.0, 2.0, 3.0])
        self.head = forward_kinematics(self.skeleton, self.rotations, self.root)[15]

    def test_exact_inversion(self):
        recovered = recover_root_translation(self.skeleton, self.rotations, self.head)
        self.assertLess(np.max(np.abs(recovered - self.root)), 1e-12)

    def test_head_offset_moves_root(self):
        delta = np.array([0.05, -0.02, 0.1])
        recovered = recover_root_translation(self.skeleton, self.rotations, self.head + delta)
        np.testing.assert_allclose(recovered - self.root, delta, atol=1e-12)

    def test_head_noise_passes_through(self):
        sigma = 0.05
        rng = np.random.default_rng(3)
        noisy = self.head + sigma * rng.standard_normal((10_000, 3))
        recovered = recover_root_translation(
            self.skeleton, np.broadcast_to(self.rotations, (10_000, 22, 3, 3)), noisy
        )
        spread = np.std(recovered - self.root, axis=0)
        np.testing.assert_allclose(spread, sigma, rtol=0.03)


class PoseSequenceTests(unittest.TestCase):
    def test_valid_flag(self):
        R = Rotation.random(3 * 22, random_state=4).as_matrix().reshape(3, 22, 3, 3)
        poses = PoseSequence(to_sixdof(R), np.zeros((3, 3)))
        self.assertTrue(poses.is_valid())
        noisy = PoseSequence(poses.rotations + 1e-3, poses.root_translation)
        self.assertFalse(noisy.is_valid())

    def test_shape_checks(self):
        with self.assertRaises(SkeletonError):
            PoseSequence(np.zeros((3, 22, 9)), np.zeros((3, 3)))
        with self.assertRaises(SkeletonError):
            PoseSequence(np.zeros((3, 22, 6)), np.zeros((2, 3)))

    def test_window(self):
        R = Rotation.random(5 * 22, random_state=5).as_matrix().reshape(5, 22, 3, 3)
        poses = PoseSequence(to_sixdof(R), np.arange(15.0).reshape(5, 3))
        part = poses.window(1, 3)
        self.assertEqual(part.frames, 2)
        np.testing.assert_array_equal(part.root_translation, poses.root_translation[1:3])


if __name__ == "__main__":
    unittest.main()
