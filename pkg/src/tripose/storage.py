"""On-disk formats.

Pose sequences and checkpoints use a length-prefixed container:
magic (4 bytes), u16 format version, u32 header length, UTF-8 JSON header, payload.
Measurement sets are JSON lines: one header line, then one line per frame.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .measurement import MeasurementSet
from .skeleton import PoseSequence, Skeleton, SkeletonError, skeleton_from_document

FORMAT_VERSION = 1
POSE_MAGIC = b"TPSQ"
_PREFIX = struct.Struct("<4sHI")


class StorageError(ValueError):
    pass


class PoseHeader(BaseModel):
    frames: int = Field(ge=0)
    joints: int = Field(ge=1)
    dtype: str = "<f8"


class MeasurementHeader(BaseModel):
    version: int
    sigma_l: float = Field(ge=0)
    sigma_r: float = Field(ge=0)
    measured: list[int]
    frames: int = Field(ge=0)


class MeasurementFrame(BaseModel):
    t: int
    loc: list[list[float]]
    rot: list[list[float]]


def write_json(path: Path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: Path):
    path = Path(path)
    if not path.exists():
        raise StorageError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise StorageError(f"invalid JSON in {path}: {exc}") from exc


def write_container(path: Path, magic: bytes, header: dict, payload: bytes) -> None:
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(raw_header)))
        fh.write(raw_header)
        fh.write(payload)


def read_container(path: Path, magic: bytes) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"file not found: {path}")
    data = path.read_bytes()
    if len(data) < _PREFIX.size:
        raise StorageError(f"truncated file: {path}")
    found, version, header_len = _PREFIX.unpack_from(data)
    if found != magic:
        raise StorageError(f"{path} is not a {magic.decode()} file")
    if version != FORMAT_VERSION:
        raise StorageError(f"version mismatch: file has {version}, expected {FORMAT_VERSION}")
    end = _PREFIX.size + header_len
    if len(data) < end:
        raise StorageError(f"truncated file: {path}")
    try:
        header = json.loads(data[_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StorageError(f"corrupt header in {path}") from exc
    return header, data[end:]


def _check_finite(rotations: np.ndarray, root: np.ndarray) -> None:
    bad = ~np.isfinite(rotations)
    if np.any(bad):
        frame, joint, _ = np.argwhere(bad)[0]
        raise StorageError(f"non-finite value at frame {frame} joint {joint}")
    bad = ~np.isfinite(root)
    if np.any(bad):
        frame, _ = np.argwhere(bad)[0]
        raise StorageError(f"non-finite root translation at frame {frame}")


def save_poses(path: Path, poses: PoseSequence) -> None:
    header = PoseHeader(frames=poses.frames, joints=poses.joint_count).model_dump()
    payload = (
        poses.rotations.astype("<f8").tobytes() + poses.root_translation.astype("<f8").tobytes()
    )
    write_container(path, POSE_MAGIC, header, payload)


def load_poses(path: Path) -> PoseSequence:
    raw, payload = read_container(path, POSE_MAGIC)
    try:
        header = PoseHeader.model_validate(raw)
    except ValidationError as exc:
        raise StorageError(f"invalid pose header: {exc}") from exc
    if header.frames == 0:
        raise StorageError("empty sequence")
    n_rot = header.frames * header.joints * 6
    n_root = header.frames * 3
    if len(payload) < 8 * (n_rot + n_root):
        raise StorageError(f"truncated file: {path}")
    values = np.frombuffer(payload, dtype="<f8", count=n_rot + n_root).astype(np.float64)
    rotations = values[:n_rot].reshape(header.frames, header.joints, 6)
    root = values[n_rot:].reshape(header.frames, 3)
    _check_finite(rotations, root)
    return PoseSequence(rotations, root)


def save_measurements(path: Path, measurements: MeasurementSet) -> None:
    header = MeasurementHeader(
        version=FORMAT_VERSION,
        sigma_l=measurements.sigma_l,
        sigma_r=measurements.sigma_r,
        measured=list(measurements.measured_joints),
        frames=measurements.frames,
    )
    lines = [json.dumps(header.model_dump())]
    for i in range(measurements.frames):
        frame = {
            "t": i,
            "loc": measurements.locations[i].tolist(),
            "rot": measurements.rotations[i].tolist(),
        }
        lines.append(json.dumps(frame))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def load_measurements(path: Path) -> MeasurementSet:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"file not found: {path}")
    lines = [line for line in path.read_text().splitlines() if line.strip()]
    if not lines:
        raise StorageError(f"truncated file: {path}")
    try:
        header = MeasurementHeader.model_validate(json.loads(lines[0]))
    except (json.JSONDecodeError, ValidationError) as exc:
        raise StorageError(f"invalid measurement header: {exc}") from exc
    if header.version != FORMAT_VERSION:
        raise StorageError(
            f"version mismatch: file has {header.version}, expected {FORMAT_VERSION}"
        )
    if header.frames == 0:
        raise StorageError("empty sequence")
    if len(lines) - 1 < header.frames:
        raise StorageError(
            f"truncated file: {path} has {len(lines) - 1} of {header.frames} frames"
        )
    k = len(header.measured)
    locations = np.empty((header.frames, k, 3))
    rotations = np.empty((header.frames, k, 6))
    for i, line in enumerate(lines[1 : header.frames + 1]):
        try:
            frame = MeasurementFrame.model_validate(json.loads(line))
        except (json.JSONDecodeError, ValidationError) as exc:
            raise StorageError(f"invalid measurement frame {i}: {exc}") from exc
        if frame.t != i:
            raise StorageError(f"frame index {frame.t} out of order, expected {i}")
        loc = np.array(frame.loc, dtype=np.float64)
        rot = np.array(frame.rot, dtype=np.float64)
        if loc.shape != (k, 3) or rot.shape != (k, 6):
            raise StorageError(f"frame {i} has wrong shape")
        for joint in range(k):
            if not (np.all(np.isfinite(loc[joint])) and np.all(np.isfinite(rot[joint]))):
                joint_id = header.measured[joint]
                raise StorageError(f"non-finite value at frame {i} joint {joint_id}")
        locations[i] = loc
        rotations[i] = rot
    return MeasurementSet(
        locations=locations,
        rotations=rotations,
        sigma_l=header.sigma_l,
        sigma_r=header.sigma_r,
        measured_joints=tuple(header.measured),
    )


def save_sequence(path: Path, item: PoseSequence | MeasurementSet) -> None:
    if isinstance(item, MeasurementSet):
        save_measurements(path, item)
    elif isinstance(item, PoseSequence):
        save_poses(path, item)
    else:
        raise TypeError(f"cannot save {type(item).__name__}")


def load_sequence(path: Path) -> PoseSequence | MeasurementSet:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"file not found: {path}")
    with path.open("rb") as fh:
        magic = fh.read(len(POSE_MAGIC))
    if magic == POSE_MAGIC:
        return load_poses(path)
    return load_measurements(path)


def save_skeleton(path: Path, skeleton: Skeleton) -> None:
    write_json(path, skeleton.to_document())


def load_skeleton(path: Path) -> Skeleton:
    try:
        return skeleton_from_document(read_json(path))
    except SkeletonError as exc:
        raise StorageError(f"{path}: {exc}") from exc
