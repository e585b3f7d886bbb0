from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .rot6d import geodesic_angle
from .skeleton import LOWER_BODY_JOINTS, UPPER_BODY_JOINTS, PoseSequence, Skeleton

CM = 100.0


class MetricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Posed:
    """A pose sequence bound to the skeleton it is evaluated on."""

    poses: PoseSequence
    skeleton: Skeleton

    @cached_property
    def locations(self) -> np.ndarray:
        return self.poses.locations(self.skeleton)

    @cached_property
    def rotations(self) -> np.ndarray:
        return self.poses.rotation_matrices()

    @property
    def frames(self) -> int:
        return self.poses.frames


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise MetricError(f"frame mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")


def position_error(pred: np.ndarray, truth: np.ndarray, joints=None) -> float:
    """Mean Euclidean distance over frames and joints, meters in, cm out."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _check_pair(pred, truth)
    if joints is not None:
        pred = pred[:, list(joints)]
        truth = truth[:, list(joints)]
    return float(np.mean(np.linalg.norm(pred - truth, axis=-1)) * CM)


def rotation_error(pred: np.ndarray, truth: np.ndarray, joints=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _check_pair(pred, truth)
    if joints is not None:
        pred = pred[:, list(joints)]
        truth = truth[:, list(joints)]
    return float(np.mean(geodesic_angle(pred, truth)))


def mpjpe(pred: Posed, truth: Posed) -> float:
    return position_error(pred.locations, truth.locations)


def mpjre(pred: Posed, truth: Posed) -> float:
    return rotation_error(pred.rotations, truth.rotations)


def upe_lpe(pred: Posed, truth: Posed) -> tuple[float, float]:
    return (
        position_error(pred.locations, truth.locations, UPPER_BODY_JOINTS),
        position_error(pred.locations, truth.locations, LOWER_BODY_JOINTS),
    )


def upper_lower_mpjre(pred: Posed, truth: Posed) -> tuple[float, float]:
    return (
        rotation_error(pred.rotations, truth.rotations, UPPER_BODY_JOINTS),
        rotation_error(pred.rotations, truth.rotations, LOWER_BODY_JOINTS),
    )


def scaled_mpjpe(pred: Posed, truth: Posed, scale: float) -> float:
    if not scale > 0:
        raise MetricError(f"scale must be positive, got {scale}")
    return mpjpe(pred, truth) / scale


def location_jitter(locations: np.ndarray) -> float:
    locations = np.asarray(locations, dtype=np.float64)
    if locations.shape[0] < 2:
        raise MetricError("jitter needs at least two frames")
    step = np.linalg.norm(np.diff(locations, axis=0), axis=-1)
    return float(np.mean(step) * CM)


def jitter(pred: Posed) -> float:
    """Mean frame-to-frame joint displacement, cm/frame."""
    return location_jitter(pred.locations)


def bone_length_error(pred: Posed) -> float:
    """Mean |observed - nominal| bone length over frames and non-root bones, cm."""
    locations = pred.locations
    parents = list(pred.skeleton.parents[1:])
    observed = np.linalg.norm(locations[:, 1:] - locations[:, parents], axis=-1)
    nominal = pred.skeleton.bone_lengths()[1:]
    return float(np.mean(np.abs(observed - nominal)) * CM)
