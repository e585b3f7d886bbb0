from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field

from .metrics import (
    Posed,
    bone_length_error,
    jitter,
    mpjpe,
    mpjre,
    scaled_mpjpe,
    upe_lpe,
    upper_lower_mpjre,
)
from .skeleton import LOWER_BODY_JOINTS, UPPER_BODY_JOINTS
from .storage import write_json

logger = logging.getLogger("tripose.reports")

REPORT_AXES = {
    "scale": "by_scale.csv",
    "sigma_l": "by_noise.csv",
    "sigma_r": "by_rotation_noise.csv",
    "sigma_b": "by_bone_noise.csv",
}

METRIC_FIELDS = (
    "mpjpe",
    "scaled_mpjpe",
    "mpjre",
    "upe",
    "lpe",
    "upper_mpjre",
    "lower_mpjre",
    "jitter",
    "bone_length_error",
)


class CellMetrics(BaseModel):
    name: str
    method: str = "guided"
    preset: str = "default"
    scale: float = Field(default=1.0, gt=0)
    sigma_l: float = Field(default=0.0, ge=0)
    sigma_r: float = Field(default=0.0, ge=0)
    sigma_b: float = Field(default=0.0, ge=0)
    mpjpe: float = Field(ge=0)
    scaled_mpjpe: float = Field(ge=0)
    mpjre: float = Field(ge=0)
    upe: float = Field(ge=0)
    lpe: float = Field(ge=0)
    upper_mpjre: float = Field(ge=0)
    lower_mpjre: float = Field(ge=0)
    jitter: float | None = Field(default=None, ge=0)
    bone_length_error: float = Field(ge=0)


class EvalReport(BaseModel):
    """Per-cell metrics in cm and degrees plus aggregates and sweep axes."""

    cells: list[CellMetrics]
    aggregate: dict[str, dict[str, float]]
    scale_axis: list[float]
    noise_axis: list[float]
    rotation_noise_axis: list[float] = Field(default_factory=list)
    bone_noise_axis: list[float] = Field(default_factory=list)
    partition: dict[str, list[int]] = Field(
        default_factory=lambda: {
            "upper": list(UPPER_BODY_JOINTS),
            "lower": list(LOWER_BODY_JOINTS),
        }
    )


def evaluate_cell(
    name: str,
    pred: Posed,
    truth: Posed,
    scale: float = 1.0,
    sigma_l: float = 0.0,
    sigma_r: float = 0.0,
    sigma_b: float = 0.0,
    preset: str = "default",
    method: str = "guided",
) -> CellMetrics:
    upe, lpe = upe_lpe(pred, truth)
    upper_re, lower_re = upper_lower_mpjre(pred, truth)
    return CellMetrics(
        name=name,
        method=method,
        preset=preset,
        scale=scale,
        sigma_l=sigma_l,
        sigma_r=sigma_r,
        sigma_b=sigma_b,
        mpjpe=mpjpe(pred, truth),
        scaled_mpjpe=scaled_mpjpe(pred, truth, scale),
        mpjre=mpjre(pred, truth),
        upe=upe,
        lpe=lpe,
        upper_mpjre=upper_re,
        lower_mpjre=lower_re,
        jitter=jitter(pred) if pred.frames > 1 else None,
        bone_length_error=bone_length_error(pred),
    )


def _means(cells: list[CellMetrics]) -> dict[str, float]:
    out = {}
    for name in METRIC_FIELDS:
        values = [getattr(c, name) for c in cells if getattr(c, name) is not None]
        if values:
            out[name] = float(np.mean(values))
    return out


def build_report(cells: list[CellMetrics]) -> EvalReport:
    by_method: dict[str, list[CellMetrics]] = defaultdict(list)
    for cell in cells:
        by_method[cell.method].append(cell)
    return EvalReport(
        cells=cells,
        aggregate={method: _means(group) for method, group in sorted(by_method.items())},
        scale_axis=sorted({c.scale for c in cells}),
        noise_axis=sorted({c.sigma_l for c in cells}),
        rotation_noise_axis=sorted({c.sigma_r for c in cells}),
        bone_noise_axis=sorted({c.sigma_b for c in cells}),
    )


def axis_rows(report: EvalReport, axis: str) -> list[dict]:
    """Mean metrics per (method, axis value); ``axis`` is one of REPORT_AXES."""
    groups: dict[tuple[str, float], list[CellMetrics]] = defaultdict(list)
    for cell in report.cells:
        groups[(cell.method, getattr(cell, axis))].append(cell)
    rows = []
    for (method, value), group in sorted(groups.items()):
        rows.append({"method": method, axis: value, "cells": len(group), **_means(group)})
    return rows


def write_report(report: EvalReport, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    write_json(report_path, report.model_dump())
    written = [report_path]
    for axis, filename in REPORT_AXES.items():
        rows = axis_rows(report, axis)
        path = out_dir / filename
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["method", axis, "cells", *METRIC_FIELDS])
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
        written.append(path)
    logger.info("wrote report to %s", out_dir)
    return written
