from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from pydantic import BaseModel, ValidationError

from .denoiser import (
    ConditioningLayout,
    PoseDenoiserNet,
    SigmaRule,
    TorchDenoiser,
    conditioning_features,
)
from .measurement import MeasurementSet
from .skeleton import JOINT_COUNT, PoseSequence
from .storage import StorageError, read_container, write_container

logger = logging.getLogger("tripose.training")

CHECKPOINT_MAGIC = b"TPCK"
MIN_WINDOWS = 10


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    window: int = 41
    steps: int = 20000
    batch_size: int = 16
    dropout: float = 0.1
    learning_rate: float = 1e-3
    seed: int = 0
    hidden: int = 128
    blocks: int = 3
    layout: str = "rotations"
    angular_velocity: bool = False
    T: float = 1.0
    log_every: int = 500

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise TrainingError(f"dropout probability must lie in [0, 1), got {self.dropout}")
        if self.window < 1 or self.steps < 1 or self.batch_size < 1:
            raise TrainingError("window, steps and batch size must be positive")
        if self.learning_rate <= 0:
            raise TrainingError("learning rate must be positive")
        if self.hidden % 8:
            raise TrainingError("hidden width must be a multiple of 8")

    @property
    def conditioning(self) -> ConditioningLayout:
        return ConditioningLayout(self.layout, self.angular_velocity)

    @property
    def sigma_rule(self) -> SigmaRule:
        return SigmaRule(T=self.T)

    def digest(self) -> str:
        """Hash of everything but the step budget, so resumed runs keep their identity."""
        payload = {k: v for k, v in asdict(self).items() if k not in ("steps", "log_every")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    denoiser: TorchDenoiser
    config: TrainConfig
    step: int
    losses: list[tuple[int, float]] = field(default_factory=list)
    optimizer_state: dict | None = None


class CheckpointHeader(BaseModel):
    window: int
    conditioning: dict
    config_hash: str
    train_config: dict
    sigma_rule: dict
    step: int
    supports_unconditional: bool


@dataclass
class Checkpoint:
    denoiser: TorchDenoiser
    header: CheckpointHeader
    optimizer_state: dict

    @property
    def config(self) -> TrainConfig:
        return TrainConfig(**self.header.train_config)


def _window_index(dataset, window: int) -> list[tuple[int, int]]:
    index = []
    for i, (poses, _) in enumerate(dataset):
        for start in range(poses.frames - window + 1):
            index.append((i, start))
    return index


def _build_net(config: TrainConfig) -> PoseDenoiserNet:
    return PoseDenoiserNet(
        cond_dim=config.conditioning.dim,
        joints=JOINT_COUNT,
        hidden=config.hidden,
        blocks=config.blocks,
    ).double()


def _batch(
    dataset: list[tuple[PoseSequence, MeasurementSet]],
    features: list[np.ndarray],
    index: list[tuple[int, int]],
    picks: np.ndarray,
    window: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    x0 = np.stack([dataset[i][0].rotations[s : s + window] for i, s in (index[k] for k in picks)])
    cond = np.stack([features[i][s : s + window] for i, s in (index[k] for k in picks)])
    return torch.from_numpy(x0), torch.from_numpy(cond)


def train_denoiser(
    dataset: list[tuple[PoseSequence, MeasurementSet]],
    config: TrainConfig,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Noise-prediction training with conditioning dropout.

    Randomness is drawn from generators seeded by (seed, first step), so a run and a
    resumed run over the same steps are reproducible.
    """
    if not dataset:
        raise TrainingError("empty dataset")
    index = _window_index(dataset, config.window)
    if len(index) < MIN_WINDOWS:
        raise TrainingError(
            f"dataset yields {len(index)} windows of {config.window} frames, "
            f"need at least {MIN_WINDOWS}"
        )
    layout = config.conditioning
    features = [conditioning_features(m, layout) for _, m in dataset]

    torch.manual_seed(config.seed)
    net = _build_net(config)
    optimizer = torch.optim.AdamW(net.parameters(), lr=config.learning_rate)
    start = 0
    if resume is not None:
        if resume.header.config_hash != config.digest():
            raise TrainingError("checkpoint was trained with a different configuration")
        net.load_state_dict(resume.denoiser.net.state_dict())
        optimizer.load_state_dict(resume.optimizer_state)
        start = resume.header.step
        logger.info("resuming from step %d", start)

    rng = np.random.default_rng([config.seed, start])
    gen = torch.Generator().manual_seed(config.seed * 1_000_003 + start)
    rule = config.sigma_rule
    losses: list[tuple[int, float]] = []
    net.train()
    for step in range(start, config.steps):
        picks = rng.integers(0, len(index), size=config.batch_size)
        x0, cond = _batch(dataset, features, index, picks, config.window)
        t = rng.uniform(0.0, config.T, size=config.batch_size)
        t = np.maximum(t, config.T * 1e-6)
        sigma = torch.tensor([rule.sigma(float(v)) for v in t], dtype=torch.float64)
        alpha_bar = 1.0 / (1.0 + sigma**2)
        noise = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        scale = alpha_bar.sqrt()[:, None, None, None]
        x_t = scale * x0 + (1.0 - alpha_bar).sqrt()[:, None, None, None] * noise
        keep = torch.rand(config.batch_size, generator=gen, dtype=torch.float64) >= config.dropout
        mask = keep.double()

        pred = net(x_t, sigma, cond, mask)
        loss = torch.mean((pred - noise) ** 2)
        value = float(loss.item())
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append((step, value))
        if step % config.log_every == 0:
            logger.info("step %d loss %.5f", step, value)

    denoiser = TorchDenoiser(
        net,
        layout=layout,
        sigma_rule=rule,
        window=config.window,
        supports_unconditional=config.dropout > 0.0,
    )
    return TrainResult(
        denoiser=denoiser,
        config=config,
        step=max(config.steps, start),
        losses=losses,
        optimizer_state=optimizer.state_dict(),
    )


def save_checkpoint(path: Path, result: TrainResult) -> None:
    header = CheckpointHeader(
        window=result.config.window,
        conditioning=result.config.conditioning.to_dict(),
        config_hash=result.config.digest(),
        train_config=asdict(result.config),
        sigma_rule=result.config.sigma_rule.to_dict(),
        step=result.step,
        supports_unconditional=result.denoiser.supports_unconditional,
    )
    buffer = io.BytesIO()
    torch.save(
        {"model": result.denoiser.net.state_dict(), "optimizer": result.optimizer_state or {}},
        buffer,
    )
    write_container(path, CHECKPOINT_MAGIC, header.model_dump(), buffer.getvalue())


def load_checkpoint(path: Path) -> Checkpoint:
    raw, payload = read_container(path, CHECKPOINT_MAGIC)
    try:
        header = CheckpointHeader.model_validate(raw)
        config = TrainConfig(**header.train_config)
    except (ValidationError, TypeError) as exc:
        raise StorageError(f"invalid checkpoint header: {exc}") from exc
    try:
        blob = torch.load(io.BytesIO(payload), weights_only=True)
    except Exception as exc:
        raise StorageError(f"truncated or corrupt checkpoint: {path}") from exc
    net = _build_net(config)
    net.load_state_dict(blob["model"])
    denoiser = TorchDenoiser(
        net,
        layout=config.conditioning,
        sigma_rule=SigmaRule(**header.sigma_rule),
        window=header.window,
        supports_unconditional=header.supports_unconditional,
    )
    return Checkpoint(denoiser=denoiser, header=header, optimizer_state=blob["optimizer"])


def write_loss_curve(path: Path, losses: list[tuple[int, float]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, value in losses:
            writer.writerow([step, repr(value)])
