from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np
from pydantic import BaseModel, Field

from .datagen import BenchmarkCell, generate_cell
from .denoiser import Denoiser
from .metrics import Posed
from .reports import CellMetrics, EvalReport, evaluate_cell
from .sampler import GuidanceConfig, Schedule, run_inference
from .skeleton import Skeleton

logger = logging.getLogger("tripose.benchmark")

GUIDED = "guided"
BASELINE = "baseline"


class ScaleTrend(BaseModel):
    method: str
    values: dict[str, float]
    flatness: float
    degradation: float


class NoiseTrend(BaseModel):
    method: str
    axis: str = "sigma_l"
    values: dict[str, float]
    rotation_values: dict[str, float] = Field(default_factory=dict)
    increase: float
    rotation_increase: float = 0.0


class TrendSummary(BaseModel):
    scale: list[ScaleTrend]
    noise: list[NoiseTrend]
    rotation_noise: list[NoiseTrend] = Field(default_factory=list)
    bone_noise: list[NoiseTrend] = Field(default_factory=list)
    noise_increase_ratio: float | None = None
    rotation_noise_increase_ratio: float | None = None


def run_cell(
    cell: BenchmarkCell,
    base: Skeleton,
    denoiser: Denoiser,
    schedule: Schedule,
    config: GuidanceConfig,
    method: str,
    seed: int,
    workers: int = 1,
) -> CellMetrics:
    data = generate_cell(cell, base)
    # bone-length noise only reaches the sampler; the measurements keep the true lengths
    believed = data.guidance_skeleton
    estimate = run_inference(data.measurements, believed, denoiser, schedule, config, seed, workers)
    scale = cell.preset.uniform_factor or 1.0
    metrics = evaluate_cell(
        cell.name,
        Posed(estimate, believed),
        Posed(data.truth, data.skeleton),
        scale=scale,
        sigma_l=cell.sigma_l,
        sigma_r=cell.sigma_r,
        sigma_b=cell.sigma_b,
        preset=cell.preset.name,
        method=method,
    )
    logger.info("%s %s: mpjpe %.2f cm", method, cell.name, metrics.mpjpe)
    return metrics


def run_benchmark(
    cells: list[BenchmarkCell],
    base: Skeleton,
    guided: Denoiser,
    schedule: Schedule,
    config: GuidanceConfig,
    baseline: Denoiser | None = None,
    seed: int = 0,
    workers: int = 1,
) -> list[CellMetrics]:
    """Guided inference on every cell, plus the unguided location-conditioned baseline."""
    results = []
    for cell in cells:
        results.append(run_cell(cell, base, guided, schedule, config, GUIDED, seed, workers))
    if baseline is not None:
        unguided = replace(config, guidance_scale=0.0)
        for cell in cells:
            results.append(
                run_cell(cell, base, baseline, schedule, unguided, BASELINE, seed, workers)
            )
    return results


def _mean_by(cells: list[CellMetrics], key: str, metric: str) -> dict[float, float]:
    groups: dict[float, list[float]] = {}
    for cell in cells:
        groups.setdefault(getattr(cell, key), []).append(getattr(cell, metric))
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


def scale_trend(report: EvalReport, method: str) -> ScaleTrend | None:
    cells = [c for c in report.cells if c.method == method and c.preset.startswith("uniform-")]
    values = _mean_by(cells, "scale", "scaled_mpjpe")
    if len(values) < 2:
        return None
    flatness = max(values.values()) / max(min(values.values()), 1e-12)
    reference = values.get(1.0)
    if reference is None:
        degradation = flatness
    else:
        degradation = max(v for k, v in values.items() if k != 1.0) / max(reference, 1e-12)
    return ScaleTrend(
        method=method,
        values={f"{k:g}": v for k, v in values.items()},
        flatness=flatness,
        degradation=degradation,
    )


def noise_trend(report: EvalReport, method: str, axis: str = "sigma_l") -> NoiseTrend | None:
    """MPJPE and MPJRE against one noise axis, lowest to highest level."""
    cells = [c for c in report.cells if c.method == method]
    values = _mean_by(cells, axis, "mpjpe")
    if len(values) < 2:
        return None
    rotation = _mean_by(cells, axis, "mpjre")
    keys = list(values)
    return NoiseTrend(
        method=method,
        axis=axis,
        values={f"{k:g}": v for k, v in values.items()},
        rotation_values={f"{k:g}": v for k, v in rotation.items()},
        increase=values[keys[-1]] - values[keys[0]],
        rotation_increase=rotation[keys[-1]] - rotation[keys[0]],
    )


def _increase_ratio(trends: dict[str, NoiseTrend | None]) -> float | None:
    guided, baseline = trends.get(GUIDED), trends.get(BASELINE)
    if guided is None or baseline is None or baseline.increase <= 0:
        return None
    return guided.increase / baseline.increase


def summarize_trends(report: EvalReport) -> TrendSummary:
    methods = sorted({c.method for c in report.cells})
    scales = [t for t in (scale_trend(report, m) for m in methods) if t is not None]
    axes = {
        axis: {m: noise_trend(report, m, axis) for m in methods}
        for axis in ("sigma_l", "sigma_r", "sigma_b")
    }

    def present(axis: str) -> list[NoiseTrend]:
        return [t for t in axes[axis].values() if t is not None]

    return TrendSummary(
        scale=scales,
        noise=present("sigma_l"),
        rotation_noise=present("sigma_r"),
        bone_noise=present("sigma_b"),
        noise_increase_ratio=_increase_ratio(axes["sigma_l"]),
        rotation_noise_increase_ratio=_increase_ratio(axes["sigma_r"]),
    )
