from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .rot6d import batch_from_sixdof
from .skeleton import MEASURED_JOINTS, PoseSequence, Skeleton, SkeletonError, forward_kinematics

logger = logging.getLogger("tripose.measurement")


class MeasurementError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Noisy per-frame sensor readings for (head, left wrist, right wrist).

    locations: (frames, 3, 3) meters; rotations: (frames, 3, 6) 6DoF.
    """

    locations: np.ndarray
    rotations: np.ndarray
    sigma_l: float
    sigma_r: float
    measured_joints: tuple[int, ...] = MEASURED_JOINTS

    def __post_init__(self):
        locations = np.asarray(self.locations, dtype=np.float64)
        rotations = np.asarray(self.rotations, dtype=np.float64)
        k = len(self.measured_joints)
        if locations.ndim != 3 or locations.shape[1:] != (k, 3):
            raise MeasurementError(f"locations must be (frames, {k}, 3), got {locations.shape}")
        if rotations.shape != (locations.shape[0], k, 6):
            raise MeasurementError(
                f"rotations must be ({locations.shape[0]}, {k}, 6), got {rotations.shape}"
            )
        if self.sigma_l < 0 or self.sigma_r < 0:
            raise MeasurementError("noise levels must be non-negative")
        object.__setattr__(self, "locations", locations)
        object.__setattr__(self, "rotations", rotations)

    @property
    def frames(self) -> int:
        return self.locations.shape[0]

    def window(self, start: int, stop: int) -> MeasurementSet:
        return MeasurementSet(
            self.locations[start:stop],
            self.rotations[start:stop],
            self.sigma_l,
            self.sigma_r,
            self.measured_joints,
        )

    def translated(self, offset: np.ndarray) -> MeasurementSet:
        """Same readings with ``offset`` (3,) or (frames, 3) added to every location."""
        offset = np.asarray(offset, dtype=np.float64)
        if offset.ndim == 2:
            offset = offset[:, None, :]
        return MeasurementSet(
            self.locations + offset,
            self.rotations,
            self.sigma_l,
            self.sigma_r,
            self.measured_joints,
        )


def extract_measurements(
    poses: PoseSequence,
    skeleton: Skeleton,
    sigma_l: float,
    sigma_r: float,
    seed: int,
) -> MeasurementSet:
    if sigma_l < 0 or sigma_r < 0:
        raise MeasurementError("noise levels must be non-negative")
    measured = list(skeleton.measured_joints)
    rng = np.random.default_rng(seed)
    locations = poses.locations(skeleton)[:, measured, :]
    rotations = poses.rotations[:, measured, :]
    location_noise = rng.standard_normal(locations.shape)
    rotation_noise = rng.standard_normal(rotations.shape)
    return MeasurementSet(
        locations=locations + sigma_l * location_noise,
        rotations=rotations + sigma_r * rotation_noise,
        sigma_l=float(sigma_l),
        sigma_r=float(sigma_r),
        measured_joints=tuple(measured),
    )


def vec_rotations(rotations: np.ndarray) -> np.ndarray:
    """Row-major vectorisation of (..., J, 3, 3) into (..., 9J)."""
    rotations = np.asarray(rotations, dtype=np.float64)
    return rotations.reshape(rotations.shape[:-3] + (rotations.shape[-3] * 9,))


@dataclass(frozen=True, eq=False)
class LinearOperatorA:
    """Linear map from stacked row-major rotation entries to measured joint locations.

    ``matrix`` has 3 rows per output location and 9 columns per joint of the skeleton.
    """

    measured_joints: tuple[int, ...]
    chains: tuple[tuple[int, ...], ...]
    kappas: tuple[np.ndarray, ...]
    matrix: np.ndarray
    joint_count: int
    differential: bool = False

    @property
    def chain_joints(self) -> tuple[int, ...]:
        """Joints whose rotation enters the operator."""
        joints = set()
        for chain in self.chains:
            joints.update(chain)
        return tuple(sorted(joints))

    @property
    def output_count(self) -> int:
        return self.matrix.shape[0] // 3

    def apply(self, vec: np.ndarray) -> np.ndarray:
        """(..., 9J) -> (..., outputs, 3)."""
        out = np.asarray(vec, dtype=np.float64) @ self.matrix.T
        return out.reshape(out.shape[:-1] + (self.output_count, 3))

    def to_differential(self) -> LinearOperatorA:
        if self.differential:
            return self
        if self.output_count != 3:
            raise MeasurementError("differential form needs exactly three measured joints")
        rows = self.matrix.reshape(3, 3, -1)
        diff = np.concatenate([rows[1] - rows[0], rows[2] - rows[0]], axis=0)
        diff.setflags(write=False)
        return LinearOperatorA(
            measured_joints=self.measured_joints,
            chains=self.chains,
            kappas=self.kappas,
            matrix=diff,
            joint_count=self.joint_count,
            differential=True,
        )


def _chain_block(kappa: np.ndarray) -> np.ndarray:
    # acts on the row-major vec of C = [R_1 ... R_{p_j}]
    return np.kron(np.eye(3), kappa.reshape(1, -1))


def build_A(skeleton: Skeleton, measured_joints=None) -> LinearOperatorA:
    measured = tuple(skeleton.measured_joints if measured_joints is None else measured_joints)
    J = skeleton.joint_count
    matrix = np.zeros((3 * len(measured), 9 * J))
    chains = []
    kappas = []
    for m, joint in enumerate(measured):
        try:
            path = skeleton.chain(int(joint))
        except SkeletonError as exc:
            raise MeasurementError(str(exc)) from exc
        ancestors = path[:-1]
        kappa = np.array([skeleton.bone_vectors[c] for c in path[1:]]).reshape(-1)
        chains.append(tuple(ancestors))
        kappas.append(kappa)
        if not ancestors:
            continue
        k = len(ancestors)
        block = _chain_block(kappa)
        for row in range(3):
            for a, ancestor in enumerate(ancestors):
                for col in range(3):
                    matrix[3 * m + row, 9 * ancestor + 3 * row + col] += block[
                        row, row * 3 * k + 3 * a + col
                    ]
    matrix.setflags(write=False)
    logger.debug("built operator for joints %s", measured)
    return LinearOperatorA(
        measured_joints=measured,
        chains=tuple(chains),
        kappas=tuple(kappas),
        matrix=matrix,
        joint_count=J,
    )


def chain_rotations(A: LinearOperatorA, r: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., J, 3, 3) with only the operator's chain joints filled in."""
    r = np.asarray(r, dtype=np.float64)
    joints = list(A.chain_joints)
    R = np.zeros(r.shape[:-1] + (3, 3))
    if joints:
        R[..., joints, :, :] = batch_from_sixdof(r[..., joints, :])
    return R


def apply_measurement_operator(A: LinearOperatorA, r: np.ndarray) -> np.ndarray:
    """A∘D: per-joint 6DoF (..., J, 6) -> predicted locations (..., outputs, 3)."""
    return A.apply(vec_rotations(chain_rotations(A, r)))


def differential_transform(locations: np.ndarray) -> np.ndarray:
    """(..., 3, 3) head/left/right locations -> (..., 2, 3) wrist-minus-head offsets."""
    locations = np.asarray(locations, dtype=np.float64)
    if locations.shape[-2:] != (3, 3):
        raise MeasurementError(f"expected (..., 3, 3) locations, got {locations.shape}")
    return locations[..., 1:, :] - locations[..., :1, :]


def measured_locations(skeleton: Skeleton, rotations: np.ndarray, root=None) -> np.ndarray:
    return forward_kinematics(skeleton, rotations, root)[..., list(skeleton.measured_joints), :]
