from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .rot6d import batch_from_sixdof, hypothesis_deviation

JOINT_NAMES = (
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
)

SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)
JOINT_COUNT = len(SMPL_PARENTS)

HEAD = 15
LEFT_WRIST = 20
RIGHT_WRIST = 21
MEASURED_JOINTS = (HEAD, LEFT_WRIST, RIGHT_WRIST)

LOWER_BODY_JOINTS = (0, 1, 2, 4, 5, 7, 8, 10, 11)
UPPER_BODY_JOINTS = tuple(j for j in range(JOINT_COUNT) if j not in LOWER_BODY_JOINTS)


class SkeletonError(ValueError):
    pass


class SkeletonDocument(BaseModel):
    parents: list[int]
    bones: list[list[float]] = Field(min_length=1)
    measured: list[int] = Field(default_factory=lambda: list(MEASURED_JOINTS))


@dataclass(frozen=True, eq=False)
class Skeleton:
    parents: tuple[int, ...]
    bone_vectors: np.ndarray
    measured_joints: tuple[int, ...] = MEASURED_JOINTS

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def head(self) -> int:
        return self.measured_joints[0]

    def chain(self, joint: int) -> list[int]:
        """Joint indices from the root down to and including ``joint``."""
        if not 0 <= joint < self.joint_count:
            raise SkeletonError(f"joint {joint} not in tree")
        out = [joint]
        while self.parents[out[-1]] >= 0:
            out.append(self.parents[out[-1]])
        return out[::-1]

    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.bone_vectors, axis=-1)

    def to_document(self) -> dict:
        return {
            "parents": list(self.parents),
            "bones": self.bone_vectors.tolist(),
            "measured": list(self.measured_joints),
        }


def _check_tree(parents: list[int]) -> None:
    n = len(parents)
    for j in range(n):
        p = parents[j]
        if p != -1 and not 0 <= p < n:
            raise SkeletonError(f"parent index {p} of joint {j} out of range")
    for j in range(n):
        seen = set()
        node = j
        while node != -1:
            if node in seen:
                raise SkeletonError(f"cycle detected at joint {j}")
            seen.add(node)
            node = parents[node]
    roots = [j for j, p in enumerate(parents) if p == -1]
    if len(roots) > 1:
        raise SkeletonError(f"multiple roots: {roots}")
    for j, p in enumerate(parents):
        if p >= j:
            raise SkeletonError(f"parent index {p} >= child index {j}")


def build_skeleton(
    parents,
    bone_vectors,
    measured_joints=MEASURED_JOINTS,
) -> Skeleton:
    parents = [int(p) for p in parents]
    bones = np.array(bone_vectors, dtype=np.float64)
    if not parents:
        raise SkeletonError("empty joint list")
    if bones.shape != (len(parents), 3):
        raise SkeletonError(
            f"bone vectors must have shape ({len(parents)}, 3), got {bones.shape}"
        )
    if not np.all(np.isfinite(bones)):
        raise SkeletonError("bone vectors must be finite")
    _check_tree(parents)
    if np.any(bones[0] != 0.0):
        raise SkeletonError("root bone vector must be zero")
    measured = tuple(int(j) for j in measured_joints)
    for j in measured:
        if not 0 <= j < len(parents):
            raise SkeletonError(f"measured joint {j} not in tree")
    bones.setflags(write=False)
    return Skeleton(parents=tuple(parents), bone_vectors=bones, measured_joints=measured)


def skeleton_from_document(raw: dict) -> Skeleton:
    try:
        doc = SkeletonDocument.model_validate(raw)
    except ValidationError as exc:
        raise SkeletonError(f"invalid skeleton document: {exc}") from exc
    return build_skeleton(doc.parents, doc.bones, doc.measured)


def default_skeleton() -> Skeleton:
    """Synthetic average body shipped with the package (meters, y up, facing +z)."""
    raw = json.loads(resources.files("tripose").joinpath("data/default_skeleton.json").read_text())
    return skeleton_from_document(raw)


def forward_kinematics(
    skeleton: Skeleton,
    rotations: np.ndarray,
    root_translation: np.ndarray | None = None,
) -> np.ndarray:
    """Global joint locations from global rotations.

    rotations: (..., J, 3, 3); root_translation: (..., 3). Returns (..., J, 3) with
    l_j = l_{p_j} + R_{p_j} b_j, evaluated in index order.
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    lead = rotations.shape[:-3]
    if root_translation is None:
        root = np.zeros(lead + (3,))
    else:
        root = np.broadcast_to(np.asarray(root_translation, dtype=np.float64), lead + (3,))
    locations = np.empty(lead + (skeleton.joint_count, 3))
    locations[..., 0, :] = root
    for j in range(1, skeleton.joint_count):
        p = skeleton.parents[j]
        offset = rotations[..., p, :, :] @ skeleton.bone_vectors[j]
        locations[..., j, :] = locations[..., p, :] + offset
    return locations


def global_from_local(skeleton: Skeleton, local_rotations: np.ndarray) -> np.ndarray:
    local_rotations = np.asarray(local_rotations, dtype=np.float64)
    out = np.empty_like(local_rotations)
    out[..., 0, :, :] = local_rotations[..., 0, :, :]
    for j in range(1, skeleton.joint_count):
        p = skeleton.parents[j]
        out[..., j, :, :] = out[..., p, :, :] @ local_rotations[..., j, :, :]
    return out


def scale_skeleton(skeleton: Skeleton, per_bone_factors) -> Skeleton:
    factors = np.asarray(per_bone_factors, dtype=np.float64)
    if factors.ndim == 0:
        factors = np.full(skeleton.joint_count, float(factors))
    if factors.shape != (skeleton.joint_count,):
        raise SkeletonError(
            f"expected {skeleton.joint_count} scale factors, got shape {factors.shape}"
        )
    if np.any(~(factors > 0)):
        bad = int(np.argwhere(~(factors > 0))[0][0])
        raise SkeletonError(f"non-positive scale factor {factors[bad]} for bone {bad}")
    return build_skeleton(
        skeleton.parents,
        skeleton.bone_vectors * factors[:, None],
        skeleton.measured_joints,
    )


def recover_root_translation(
    skeleton: Skeleton,
    rotations: np.ndarray,
    measured_head_location: np.ndarray,
) -> np.ndarray:
    """Drag the zero-rooted pose so its head lands on the measured head location."""
    zero_rooted = forward_kinematics(skeleton, rotations)
    return np.asarray(measured_head_location, dtype=np.float64) - zero_rooted[..., skeleton.head, :]


@dataclass(frozen=True, eq=False)
class PoseSequence:
    """Per-frame global 6DoF joint rotations (frames, J, 6) and root translation (frames, 3)."""

    rotations: np.ndarray
    root_translation: np.ndarray

    def __post_init__(self):
        rotations = np.asarray(self.rotations, dtype=np.float64)
        root = np.asarray(self.root_translation, dtype=np.float64)
        if rotations.ndim != 3 or rotations.shape[-1] != 6:
            raise SkeletonError(f"rotations must be (frames, joints, 6), got {rotations.shape}")
        if root.shape != (rotations.shape[0], 3):
            raise SkeletonError(
                f"root translation must be ({rotations.shape[0]}, 3), got {root.shape}"
            )
        object.__setattr__(self, "rotations", rotations)
        object.__setattr__(self, "root_translation", root)

    @property
    def frames(self) -> int:
        return self.rotations.shape[0]

    @property
    def joint_count(self) -> int:
        return self.rotations.shape[1]

    def rotation_matrices(self) -> np.ndarray:
        return batch_from_sixdof(self.rotations)

    def is_valid(self, tol: float = 1e-9) -> bool:
        return bool(np.all(hypothesis_deviation(self.rotations) <= tol))

    def window(self, start: int, stop: int) -> PoseSequence:
        return PoseSequence(self.rotations[start:stop], self.root_translation[start:stop])

    def locations(self, skeleton: Skeleton) -> np.ndarray:
        return forward_kinematics(skeleton, self.rotation_matrices(), self.root_translation)
