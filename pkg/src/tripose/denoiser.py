from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
import torch
from torch import nn

from .measurement import MeasurementSet, differential_transform
from .skeleton import JOINT_COUNT, PoseSequence

logger = logging.getLogger("tripose.denoiser")

FD_VJP_STEP = 1e-4
LAYOUTS = ("rotations", "rotations+locations")


class CapabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class SigmaRule:
    """Maps diffusion time t in [0, T] to the noise level sigma_t (sigma_0 = 0)."""

    kind: str = "karras"
    sigma_min: float = 0.002
    sigma_max: float = 20.0
    rho: float = 7.0
    T: float = 1.0

    def sigma(self, t: float) -> float:
        if t <= 0.0:
            return 0.0
        u = min(t / self.T, 1.0)
        if self.kind == "linear":
            return self.sigma_max * u
        if self.kind == "karras":
            lo = self.sigma_min ** (1.0 / self.rho)
            hi = self.sigma_max ** (1.0 / self.rho)
            return (lo + u * (hi - lo)) ** self.rho
        raise ValueError(f"unknown sigma rule: {self.kind}")

    def alpha_bar(self, t: float) -> float:
        return 1.0 / (1.0 + self.sigma(t) ** 2)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "rho": self.rho,
            "T": self.T,
        }


@dataclass(frozen=True)
class ConditioningLayout:
    kind: str = "rotations"
    angular_velocity: bool = False

    def __post_init__(self):
        if self.kind not in LAYOUTS:
            raise ValueError(f"unknown conditioning layout: {self.kind}")

    @property
    def dim(self) -> int:
        dim = 18
        if self.angular_velocity:
            dim += 18
        if self.kind == "rotations+locations":
            dim += 7
        return dim

    def to_dict(self) -> dict:
        return {"kind": self.kind, "angular_velocity": self.angular_velocity, "dim": self.dim}


def conditioning_features(measurements: MeasurementSet, layout: ConditioningLayout) -> np.ndarray:
    """Per-frame conditioning vector (frames, layout.dim).

    The "rotations" layout never looks at measured locations.
    """
    rotations = measurements.rotations.reshape(measurements.frames, -1)
    parts = [rotations]
    if layout.angular_velocity:
        parts.append(np.diff(rotations, axis=0, prepend=rotations[:1]))
    if layout.kind == "rotations+locations":
        offsets = differential_transform(measurements.locations).reshape(measurements.frames, -1)
        head_height = measurements.locations[:, 0, 1:2]
        parts.extend([offsets, head_height])
    return np.concatenate(parts, axis=-1)


@runtime_checkable
class Denoiser(Protocol):
    """Conditional noise predictor eps(r_t, t, cond) over (frames, joints, 6) windows."""

    window: int
    sigma_rule: SigmaRule
    supports_unconditional: bool

    def predict(self, r_t: np.ndarray, t: float, cond: np.ndarray | None) -> np.ndarray: ...

    def conditioning(self, measurements: MeasurementSet) -> np.ndarray | None: ...

    def restrict(self, start: int, stop: int) -> Denoiser: ...


def tweedie(r_t: np.ndarray, eps: np.ndarray, alpha_bar: float) -> np.ndarray:
    return (r_t - math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha_bar)


def finite_difference_vjp(
    denoiser: Denoiser,
    r_t: np.ndarray,
    t: float,
    cond: np.ndarray | None,
    cotangent: np.ndarray,
    step: float = FD_VJP_STEP,
) -> np.ndarray:
    """(d r_hat / d r_t)^T v by forward differences; one prediction per input entry."""
    alpha_bar = denoiser.sigma_rule.alpha_bar(t)
    base = tweedie(r_t, denoiser.predict(r_t, t, cond), alpha_bar)
    flat = r_t.reshape(-1)
    grad = np.empty(flat.size)
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] += step
        x = shifted.reshape(r_t.shape)
        moved = tweedie(x, denoiser.predict(x, t, cond), alpha_bar)
        grad[i] = np.sum((moved - base) * cotangent) / step
    return grad.reshape(r_t.shape)


def denoised_vjp(
    denoiser: Denoiser,
    r_t: np.ndarray,
    t: float,
    cond: np.ndarray | None,
    cotangent: np.ndarray,
) -> np.ndarray:
    vjp = getattr(denoiser, "vjp", None)
    if vjp is None:
        return finite_difference_vjp(denoiser, r_t, t, cond, cotangent)
    return vjp(r_t, t, cond, cotangent)


def _require_unconditional(denoiser: Denoiser) -> None:
    if not denoiser.supports_unconditional:
        raise CapabilityError("denoiser was trained without conditioning dropout")


def predict_with_cfg(
    denoiser: Denoiser,
    r_t: np.ndarray,
    t: float,
    cond: np.ndarray | None,
    cfg_weight: float = 1.0,
) -> np.ndarray:
    if cfg_weight == 1.0:
        return denoiser.predict(r_t, t, cond)
    _require_unconditional(denoiser)
    eps_uncond = denoiser.predict(r_t, t, None)
    if cfg_weight == 0.0:
        return eps_uncond
    eps_cond = denoiser.predict(r_t, t, cond)
    return eps_uncond + cfg_weight * (eps_cond - eps_uncond)


def vjp_with_cfg(
    denoiser: Denoiser,
    r_t: np.ndarray,
    t: float,
    cond: np.ndarray | None,
    cotangent: np.ndarray,
    cfg_weight: float = 1.0,
) -> np.ndarray:
    if cfg_weight == 1.0:
        return denoised_vjp(denoiser, r_t, t, cond, cotangent)
    _require_unconditional(denoiser)
    grad_uncond = denoised_vjp(denoiser, r_t, t, None, cotangent)
    if cfg_weight == 0.0:
        return grad_uncond
    grad_cond = denoised_vjp(denoiser, r_t, t, cond, cotangent)
    return grad_uncond + cfg_weight * (grad_cond - grad_uncond)


class OracleDenoiser:
    """Returns the exact noise of a known pose, so Tweedie recovers it."""

    supports_unconditional = True

    def __init__(self, ground_truth: PoseSequence, sigma_rule: SigmaRule | None = None):
        self.ground_truth = ground_truth
        self.sigma_rule = sigma_rule or SigmaRule()
        self.window = ground_truth.frames

    def predict(self, r_t: np.ndarray, t: float, cond: np.ndarray | None) -> np.ndarray:
        target = self.ground_truth.rotations
        if r_t.shape != target.shape:
            raise ValueError(f"oracle expects shape {target.shape}, got {r_t.shape}")
        alpha_bar = self.sigma_rule.alpha_bar(t)
        if alpha_bar >= 1.0:
            return np.zeros_like(r_t)
        return (r_t - math.sqrt(alpha_bar) * target) / math.sqrt(1.0 - alpha_bar)

    def vjp(self, r_t, t, cond, cotangent) -> np.ndarray:
        return np.zeros_like(np.asarray(r_t, dtype=np.float64))

    def conditioning(self, measurements: MeasurementSet) -> None:
        return None

    def restrict(self, start: int, stop: int) -> OracleDenoiser:
        return OracleDenoiser(self.ground_truth.window(start, stop), self.sigma_rule)


def oracle_denoiser(
    ground_truth: PoseSequence, sigma_rule: SigmaRule | None = None
) -> OracleDenoiser:
    return OracleDenoiser(ground_truth, sigma_rule)


def _time_embedding(c_noise: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(1000.0) * torch.arange(half, dtype=c_noise.dtype) / max(half - 1, 1)
    )
    angles = c_noise[:, None] * freqs[None, :] * 100.0
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, embed_dim: int, kernel_size: int = 5):
        super().__init__()
        padding = kernel_size // 2
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv1d(channels, channels, kernel_size, padding=padding)
        self.film = nn.Linear(embed_dim, 2 * channels)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size, padding=padding)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        x = self.conv1(nn.functional.silu(self.norm1(h)))
        scale, shift = self.film(emb).chunk(2, dim=-1)
        x = self.norm2(x) * (1 + scale[..., None]) + shift[..., None]
        x = self.conv2(nn.functional.silu(x))
        return h + x


class PoseDenoiserNet(nn.Module):
    """Temporal residual convolution over per-frame (joints x 6) tokens."""

    def __init__(
        self,
        cond_dim: int,
        joints: int = JOINT_COUNT,
        hidden: int = 128,
        blocks: int = 3,
        embed_dim: int = 64,
    ):
        super().__init__()
        self.joints = joints
        self.cond_dim = cond_dim
        self.embed_dim = embed_dim
        pose_dim = joints * 6
        self.time_mlp = nn.Sequential(
            nn.Linear(embed_dim, embed_dim), nn.SiLU(), nn.Linear(embed_dim, embed_dim)
        )
        self.inp = nn.Conv1d(pose_dim + cond_dim + 1, hidden, 1)
        self.blocks = nn.ModuleList(ResidualBlock(hidden, embed_dim) for _ in range(blocks))
        self.out_norm = nn.GroupNorm(8, hidden)
        self.out = nn.Conv1d(hidden, pose_dim, 1)

    def forward(
        self,
        x: torch.Tensor,
        sigma: torch.Tensor,
        cond: torch.Tensor,
        mask: torch.Tensor,
    ) -> torch.Tensor:
        # x: (B, F, J, 6); cond: (B, F, D); mask: (B,)
        batch, frames = x.shape[:2]
        tokens = x.reshape(batch, frames, -1)
        mask_channel = mask[:, None, None].expand(batch, frames, 1)
        h = torch.cat([tokens, cond * mask_channel, mask_channel], dim=-1).transpose(1, 2)
        emb = self.time_mlp(_time_embedding(torch.log(sigma) / 4.0, self.embed_dim))
        h = self.inp(h)
        for block in self.blocks:
            h = block(h, emb)
        out = self.out(nn.functional.silu(self.out_norm(h)))
        return out.transpose(1, 2).reshape(x.shape)


class TorchDenoiser:
    def __init__(
        self,
        net: PoseDenoiserNet,
        layout: ConditioningLayout,
        sigma_rule: SigmaRule,
        window: int,
        supports_unconditional: bool,
    ):
        self.net = net.double().eval()
        self.layout = layout
        self.sigma_rule = sigma_rule
        self.window = window
        self.supports_unconditional = supports_unconditional

    def _inputs(self, r_t: np.ndarray, t: float, cond: np.ndarray | None):
        if r_t.ndim != 3 or r_t.shape[1:] != (self.net.joints, 6):
            raise ValueError(f"expected (frames, {self.net.joints}, 6), got {r_t.shape}")
        frames = r_t.shape[0]
        sigma = self.sigma_rule.sigma(t)
        if sigma <= 0.0:
            raise ValueError("cannot predict noise at sigma = 0")
        if cond is None:
            if not self.supports_unconditional:
                raise CapabilityError("denoiser was trained without conditioning dropout")
            cond_t = torch.zeros((1, frames, self.layout.dim), dtype=torch.float64)
            mask = torch.zeros(1, dtype=torch.float64)
        else:
            cond = np.asarray(cond, dtype=np.float64)
            if cond.shape != (frames, self.layout.dim):
                raise ValueError(
                    f"conditioning must be ({frames}, {self.layout.dim}), got {cond.shape}"
                )
            cond_t = torch.from_numpy(cond)[None]
            mask = torch.ones(1, dtype=torch.float64)
        sigma_t = torch.tensor([sigma], dtype=torch.float64)
        return sigma_t, cond_t, mask

    def predict(self, r_t: np.ndarray, t: float, cond: np.ndarray | None) -> np.ndarray:
        r_t = np.asarray(r_t, dtype=np.float64)
        sigma_t, cond_t, mask = self._inputs(r_t, t, cond)
        with torch.no_grad():
            eps = self.net(torch.from_numpy(r_t)[None], sigma_t, cond_t, mask)
        return eps[0].numpy()

    def vjp(self, r_t: np.ndarray, t: float, cond: np.ndarray | None, cotangent: np.ndarray):
        r_t = np.asarray(r_t, dtype=np.float64)
        sigma_t, cond_t, mask = self._inputs(r_t, t, cond)
        alpha_bar = self.sigma_rule.alpha_bar(t)
        x = torch.from_numpy(r_t.copy())[None].requires_grad_(True)
        with torch.enable_grad():
            eps = self.net(x, sigma_t, cond_t, mask)
            r_hat = (x - math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha_bar)
            (grad,) = torch.autograd.grad(
                r_hat, x, torch.from_numpy(np.asarray(cotangent, dtype=np.float64))[None]
            )
        return grad[0].numpy()

    def conditioning(self, measurements: MeasurementSet) -> np.ndarray:
        return conditioning_features(measurements, self.layout)

    def restrict(self, start: int, stop: int) -> TorchDenoiser:
        return self

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())
