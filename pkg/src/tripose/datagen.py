"""Procedural motions, body-shape presets and benchmark manifests."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, ValidationError
from scipy.spatial.transform import Rotation

from .measurement import MeasurementSet, extract_measurements
from .rot6d import to_sixdof
from .skeleton import (
    PoseSequence,
    Skeleton,
    forward_kinematics,
    global_from_local,
    scale_skeleton,
)
from .storage import read_json

logger = logging.getLogger("tripose.datagen")

FRAME_RATE = 60
MOTION_KINDS = ("walk", "arm-swing", "squat", "reach", "idle-sway")
MAX_AMPLITUDE = 2.0

LEG_BONES = (1, 2, 4, 5, 7, 8, 10, 11)
TORSO_BONES = (3, 6, 9, 12, 13, 14, 15)
ARM_BONES = (16, 17, 18, 19, 20, 21)
FOOT_JOINTS = (10, 11)
# bone lengths never drop below this when perturbed, meters
MIN_BONE_LENGTH = 0.01
BONE_NOISE_STREAM = 2

# joint groups driven together
HIPS = (1, 2)
KNEES = (4, 5)
ANKLES = (7, 8)
ELBOWS = (18, 19)
SPINE = (3, 6, 9)
ARM_REST_DEG = 65.0


class MotionSpecError(ValueError):
    pass


class ScalePresetError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class MotionSpec:
    kind: str
    frames: int
    amplitude: float = 1.0
    seed: int = 0
    fps: int = FRAME_RATE

    def __post_init__(self):
        if self.kind not in MOTION_KINDS:
            raise MotionSpecError(f"unknown motion kind: {self.kind}")
        if self.frames < 1:
            raise MotionSpecError("frames must be at least 1")
        if not 0.0 <= self.amplitude <= MAX_AMPLITUDE:
            raise MotionSpecError(
                f"amplitude {self.amplitude} outside the safe range [0, {MAX_AMPLITUDE}]"
            )
        if self.fps <= 0:
            raise MotionSpecError("fps must be positive")


def _local_angles(spec: MotionSpec, phase: float, t: np.ndarray, joints: int) -> np.ndarray:
    """Per-frame xyz Euler angles (frames, joints, 3) in degrees."""
    a = spec.amplitude
    angles = np.zeros((t.size, joints, 3))
    angles[:, 16, 2] = -ARM_REST_DEG
    angles[:, 17, 2] = ARM_REST_DEG

    if spec.kind == "walk":
        w = 2.0 * np.pi * 1.0 * t + phase
        swing = np.sin(w)
        angles[:, 1, 0] = -25.0 * a * swing
        angles[:, 2, 0] = 25.0 * a * swing
        angles[:, 4, 0] = 20.0 * a * (1.0 + np.sin(w + np.pi / 2))
        angles[:, 5, 0] = 20.0 * a * (1.0 - np.sin(w + np.pi / 2))
        angles[:, 7, 0] = -8.0 * a * swing
        angles[:, 8, 0] = 8.0 * a * swing
        angles[:, 16, 0] = 20.0 * a * swing
        angles[:, 17, 0] = -20.0 * a * swing
        angles[:, 18, 1] = 10.0 * a
        angles[:, 19, 1] = -10.0 * a
        angles[:, 9, 1] = 4.0 * a * swing
    elif spec.kind == "arm-swing":
        w = 2.0 * np.pi * 0.8 * t + phase
        angles[:, 16, 0] = -45.0 * a * np.sin(w)
        angles[:, 17, 0] = 45.0 * a * np.sin(w)
        angles[:, 18, 1] = 20.0 * a * (1.0 + np.sin(w))
        angles[:, 19, 1] = -20.0 * a * (1.0 + np.sin(w))
    elif spec.kind == "squat":
        depth = 0.5 * (1.0 - np.cos(2.0 * np.pi * 0.4 * t + phase))
        angles[:, HIPS, 0] = -45.0 * a * depth[:, None]
        angles[:, KNEES, 0] = 80.0 * a * depth[:, None]
        angles[:, ANKLES, 0] = -30.0 * a * depth[:, None]
        angles[:, 3, 0] = 15.0 * a * depth
        angles[:, 16, 1] = -35.0 * a * depth
        angles[:, 17, 1] = 35.0 * a * depth
    elif spec.kind == "reach":
        lift = 0.5 * (1.0 - np.cos(2.0 * np.pi * 0.5 * t + phase))
        angles[:, 17, 2] = ARM_REST_DEG - 40.0 * a * lift
        angles[:, 17, 1] = 30.0 * a * lift
        angles[:, 19, 1] = -25.0 * a * (1.0 - lift)
        angles[:, 6, 1] = -8.0 * a * lift
    elif spec.kind == "idle-sway":
        w = 2.0 * np.pi * 0.3 * t + phase
        angles[:, SPINE, 2] = 2.0 * a * np.sin(w)[:, None]
        angles[:, 15, 1] = 6.0 * a * np.sin(0.7 * w)
        angles[:, ELBOWS, 1] = 4.0 * a * np.sin(w)[:, None] * np.array([1.0, -1.0])
    return angles


def generate_motion(spec: MotionSpec, skeleton: Skeleton) -> PoseSequence:
    rng = np.random.default_rng(spec.seed)
    phase = float(rng.uniform(0.0, 2.0 * np.pi))
    J = skeleton.joint_count
    t = np.arange(spec.frames) / spec.fps
    angles = _local_angles(spec, phase, t, J)
    if spec.kind == "walk":
        angles[:, 0, 1] = 90.0
    elif spec.kind == "idle-sway":
        angles[:, 0, 2] = 1.5 * spec.amplitude * np.sin(2.0 * np.pi * 0.3 * t + phase)

    local = Rotation.from_euler("xyz", angles.reshape(-1, 3), degrees=True).as_matrix()
    rotations = global_from_local(skeleton, local.reshape(spec.frames, J, 3, 3))

    # root height puts the lowest foot on the floor
    zero_rooted = forward_kinematics(skeleton, rotations)
    root = np.zeros((spec.frames, 3))
    root[:, 1] = -np.min(zero_rooted[:, list(FOOT_JOINTS), 1], axis=1)
    if spec.kind == "walk":
        speed = 0.6 + 0.6 * spec.amplitude
        root[:, 0] = speed * t
    logger.debug("generated %s motion, %d frames", spec.kind, spec.frames)
    return PoseSequence(to_sixdof(rotations), root)


@dataclass(frozen=True)
class ScalePreset:
    """Per-group bone scale factors; ``preserves_root`` keeps l_1 and the legs fixed."""

    name: str
    legs: float = 1.0
    torso: float = 1.0
    arms: float = 1.0
    preserves_root: bool = True

    def factors(self, joints: int) -> np.ndarray:
        out = np.ones(joints)
        out[list(LEG_BONES)] = self.legs
        out[list(TORSO_BONES)] = self.torso
        out[list(ARM_BONES)] = self.arms
        return out

    @property
    def uniform_factor(self) -> float | None:
        if self.legs == self.torso == self.arms:
            return self.legs
        return None


def _uniform(scale: float) -> ScalePreset:
    return ScalePreset(f"uniform-{scale:g}", scale, scale, scale, preserves_root=False)


UNIFORM_SCALES = (0.6, 0.8, 1.0, 1.2, 1.4)

PRESETS = {
    "default": ScalePreset("default"),
    **{f"uniform-{s:g}": _uniform(s) for s in UNIFORM_SCALES},
    "upper-1.4": ScalePreset("upper-1.4", torso=1.4, arms=1.4),
    "arms-1.4-torso-0.7": ScalePreset("arms-1.4-torso-0.7", torso=0.7, arms=1.4),
    "upper-0.7": ScalePreset("upper-0.7", torso=0.7, arms=0.7),
    "arms-1.4": ScalePreset("arms-1.4", arms=1.4),
    "arms-0.7": ScalePreset("arms-0.7", arms=0.7),
}


def get_preset(name: str) -> ScalePreset:
    if name in PRESETS:
        return PRESETS[name]
    if name.startswith("uniform-"):
        try:
            scale = float(name.removeprefix("uniform-"))
        except ValueError:
            pass
        else:
            if scale > 0:
                return _uniform(scale)
    raise ScalePresetError(f"unknown scale preset: {name}")


def scale_ground_truth(
    poses: PoseSequence,
    skeleton: Skeleton,
    preset: ScalePreset | str,
) -> tuple[PoseSequence, Skeleton]:
    """Rescale bones; rotations are shared, root translation follows l_1's convention."""
    if isinstance(preset, str):
        preset = get_preset(preset)
    if preset.preserves_root and preset.legs != 1.0:
        raise ScalePresetError(f"preset {preset.name} changes the legs but claims to keep l_1")
    if not preset.preserves_root and preset.uniform_factor is None:
        raise ScalePresetError(f"preset {preset.name} rescales l_1 without a uniform factor")
    scaled = scale_skeleton(skeleton, preset.factors(skeleton.joint_count))
    if preset.preserves_root:
        root = poses.root_translation
    else:
        root = poses.root_translation * preset.uniform_factor
    return PoseSequence(poses.rotations, root), scaled


def perturb_bone_lengths(skeleton: Skeleton, sigma_b: float, seed) -> Skeleton:
    """Same bone directions, lengths off by N(0, sigma_b^2) meters each."""
    if sigma_b < 0:
        raise ScalePresetError(f"bone length noise must be non-negative, got {sigma_b}")
    if sigma_b == 0:
        return skeleton
    lengths = skeleton.bone_lengths()
    rng = np.random.default_rng(seed)
    noisy = np.maximum(lengths + sigma_b * rng.standard_normal(lengths.shape), MIN_BONE_LENGTH)
    factors = np.ones_like(lengths)
    np.divide(noisy, lengths, out=factors, where=lengths > 0)
    return scale_skeleton(skeleton, factors)


class MotionModel(BaseModel):
    kind: str
    frames: int = Field(default=240, ge=1)
    amplitude: float = 1.0
    seed: int = 0

    def to_spec(self) -> MotionSpec:
        return MotionSpec(self.kind, self.frames, self.amplitude, self.seed)


class CellModel(BaseModel):
    motion: MotionModel
    preset: str = "default"
    sigma_l: float = Field(default=0.0, ge=0)
    sigma_r: float = Field(default=0.0, ge=0)
    sigma_b: float = Field(default=0.0, ge=0)
    seed: int = 0


class GridModel(BaseModel):
    motions: list[MotionModel]
    presets: list[str] = Field(default_factory=lambda: ["default"])
    sigma_l: list[float] = Field(default_factory=lambda: [0.0])
    sigma_r: list[float] = Field(default_factory=lambda: [0.0])
    sigma_b: list[float] = Field(default_factory=lambda: [0.0])
    seeds: list[int] = Field(default_factory=lambda: [0])


class BenchmarkManifest(BaseModel):
    name: str = "benchmark"
    cells: list[CellModel] = Field(default_factory=list)
    grid: GridModel | None = None


@dataclass(frozen=True)
class BenchmarkCell:
    name: str
    motion: MotionSpec
    preset: ScalePreset
    sigma_l: float
    sigma_r: float
    seed: int
    sigma_b: float = 0.0

    def lock(self) -> dict:
        return {
            "name": self.name,
            "motion": {
                "kind": self.motion.kind,
                "frames": self.motion.frames,
                "amplitude": self.motion.amplitude,
                "seed": self.motion.seed,
            },
            "preset": self.preset.name,
            "sigma_l": self.sigma_l,
            "sigma_r": self.sigma_r,
            "sigma_b": self.sigma_b,
            "seed": self.seed,
        }


@dataclass
class CellData:
    cell: BenchmarkCell
    truth: PoseSequence
    skeleton: Skeleton
    measurements: MeasurementSet
    guidance_skeleton: Skeleton


def load_manifest(path: Path) -> BenchmarkManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        return BenchmarkManifest.model_validate(read_json(path))
    except ValidationError as exc:
        raise ManifestError(f"invalid manifest {path}: {exc}") from exc


def _cell(index: int, raw: CellModel) -> BenchmarkCell:
    try:
        motion = raw.motion.to_spec()
        preset = get_preset(raw.preset)
    except (MotionSpecError, ScalePresetError) as exc:
        raise ManifestError(f"cell {index}: {exc}") from exc
    return BenchmarkCell(
        name=f"cell-{index:03d}",
        motion=motion,
        preset=preset,
        sigma_l=raw.sigma_l,
        sigma_r=raw.sigma_r,
        sigma_b=raw.sigma_b,
        seed=raw.seed,
    )


def expand_manifest(manifest: BenchmarkManifest) -> list[BenchmarkCell]:
    """Explicit cells first, then the grid in motion/preset/sigma_l/sigma_r/sigma_b/seed order."""
    raw = list(manifest.cells)
    if manifest.grid is not None:
        g = manifest.grid
        for motion, preset, sl, sr, sb, seed in itertools.product(
            g.motions, g.presets, g.sigma_l, g.sigma_r, g.sigma_b, g.seeds
        ):
            raw.append(
                CellModel(
                    motion=motion, preset=preset, sigma_l=sl, sigma_r=sr, sigma_b=sb, seed=seed
                )
            )
    if not raw:
        raise ManifestError("manifest has no cells")
    return [_cell(i, cell) for i, cell in enumerate(raw)]


def generate_cell(cell: BenchmarkCell, base: Skeleton) -> CellData:
    poses = generate_motion(cell.motion, base)
    truth, skeleton = scale_ground_truth(poses, base, cell.preset)
    measurements = extract_measurements(truth, skeleton, cell.sigma_l, cell.sigma_r, cell.seed)
    believed = perturb_bone_lengths(skeleton, cell.sigma_b, (cell.seed, BONE_NOISE_STREAM))
    return CellData(
        cell=cell,
        truth=truth,
        skeleton=skeleton,
        measurements=measurements,
        guidance_skeleton=believed,
    )
