import argparse
import logging
import sys
from pathlib import Path
from typing import Any

from pydantic import BaseModel
from rich.console import Console
from rich.table import Table

from .benchmark import run_benchmark, summarize_trends
from .config import load_settings
from .datagen import expand_manifest, generate_cell, load_manifest
from .denoiser import CapabilityError, SigmaRule, oracle_denoiser
from .logging import setup_logging
from .metrics import Posed
from .reports import build_report, evaluate_cell, write_report
from .sampler import DivergenceError, GuidanceConfig, make_schedule, run_inference
from .skeleton import default_skeleton
from .storage import (
    load_measurements,
    load_poses,
    load_skeleton,
    read_json,
    save_measurements,
    save_poses,
    save_skeleton,
    write_json,
)
from .training import (
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_denoiser,
    write_loss_curve,
)
from .verification import run_verification, sign_error_hook

logger = logging.getLogger("tripose.cli")
console = Console()

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

GUIDANCE_SKELETON = "guidance_skeleton.json"

SAMPLER_DEFAULTS = {
    "steps": 50,
    "eta": 0.0,
    "guidance_scale": 1.0,
    "covariance_mode": "identity",
    "cfg_weight": 1.0,
    "score_weight": "variance",
    "sigma_l": None,
    "seed": 0,
}

DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-data": {"manifest": None, "out": None, "skeleton": None},
    "train": {
        "data": None,
        "out": "denoiser.ckpt",
        "resume": None,
        "window": 41,
        "train_steps": 20000,
        "batch_size": 16,
        "dropout": 0.1,
        "learning_rate": 1e-3,
        "layout": "rotations",
        "angular_velocity": False,
        "seed": 0,
    },
    "infer": {
        "measurements": None,
        "skeleton": None,
        "cell": None,
        "checkpoint": None,
        "oracle": None,
        "out": None,
        **SAMPLER_DEFAULTS,
    },
    "eval": {
        "pred": None,
        "truth": None,
        "skeleton": None,
        "manifest": None,
        "scale": 1.0,
        "out": "report",
    },
    "verify": {
        "samples": 200_000,
        "points": 20,
        "partitions": 1,
        "seed": 0,
        "inject_sign_error": None,
        "out": None,
    },
    "benchmark": {
        "manifest": None,
        "checkpoint": None,
        "baseline_checkpoint": None,
        "out": "benchmark",
        **SAMPLER_DEFAULTS,
    },
}


class UsageError(ValueError):
    pass


class RunConfig(BaseModel):
    command: str
    options: dict[str, Any]
    log_level: str


def _print_table(title: str, columns: list[str], rows: list[list[str]]) -> None:
    table = Table(title=title)
    for column in columns:
        table.add_column(column)
    for row in rows:
        table.add_row(*row)
    console.print(table)


def _options(args) -> dict[str, Any]:
    """Defaults, overlaid by the --config file, overlaid by explicit flags."""
    defaults = DEFAULTS[args.cmd]
    opts = dict(defaults)
    if args.config:
        raw = read_json(Path(args.config))
        if not isinstance(raw, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
        unknown = sorted(set(raw) - set(defaults))
        if unknown:
            raise UsageError(f"unknown options in {args.config}: {', '.join(unknown)}")
        opts.update(raw)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def _echo(out_dir: Path, command: str, opts: dict[str, Any]) -> None:
    echo = RunConfig(command=command, options=opts, log_level=load_settings().log_level)
    write_json(Path(out_dir) / "run_config.json", echo.model_dump())


def _require(opts: dict[str, Any], *keys: str) -> None:
    for key in keys:
        if opts.get(key) is None:
            raise UsageError(f"--{key.replace('_', '-')} is required")


def _guidance(opts: dict[str, Any]) -> GuidanceConfig:
    return GuidanceConfig(
        eta=float(opts["eta"]),
        guidance_scale=float(opts["guidance_scale"]),
        sigma_l=None if opts["sigma_l"] is None else float(opts["sigma_l"]),
        covariance_mode=opts["covariance_mode"],
        cfg_weight=float(opts["cfg_weight"]),
        score_weight=opts["score_weight"],
    )


def _cell_dirs(data_dir: Path) -> list[Path]:
    dirs = sorted(p for p in Path(data_dir).glob("cell-*") if p.is_dir())
    if not dirs:
        raise UsageError(f"no cell directories under {data_dir}")
    return dirs


def _cell_skeleton(cell_dir: Path) -> Path:
    """Skeleton the sampler should use: the bone-noise copy when gen-data wrote one."""
    believed = cell_dir / GUIDANCE_SKELETON
    return believed if believed.exists() else cell_dir / "skeleton.json"


def cmd_gen_data(args) -> int:
    opts = _options(args)
    _require(opts, "manifest")
    out = Path(opts["out"] or load_settings().data_dir)
    manifest = load_manifest(Path(opts["manifest"]))
    base = load_skeleton(Path(opts["skeleton"])) if opts["skeleton"] else default_skeleton()
    cells = expand_manifest(manifest)
    for cell in cells:
        data = generate_cell(cell, base)
        cell_dir = out / cell.name
        save_poses(cell_dir / "truth.tpsq", data.truth)
        save_measurements(cell_dir / "measurements.jsonl", data.measurements)
        save_skeleton(cell_dir / "skeleton.json", data.skeleton)
        if cell.sigma_b > 0:
            save_skeleton(cell_dir / GUIDANCE_SKELETON, data.guidance_skeleton)
    write_json(
        out / "manifest.lock.json",
        {"name": manifest.name, "cells": [cell.lock() for cell in cells]},
    )
    _echo(out, args.cmd, opts)
    _print_table(
        "Generated cells",
        ["Cell", "Motion", "Preset", "sigma_l", "sigma_r", "sigma_b"],
        [
            [
                c.name,
                c.motion.kind,
                c.preset.name,
                f"{c.sigma_l:g}",
                f"{c.sigma_r:g}",
                f"{c.sigma_b:g}",
            ]
            for c in cells
        ],
    )
    logger.info("wrote %d cells to %s", len(cells), out)
    return EXIT_OK


def cmd_train(args) -> int:
    opts = _options(args)
    data_dir = Path(opts["data"] or load_settings().data_dir)
    dataset = []
    for cell_dir in _cell_dirs(data_dir):
        truth = load_poses(cell_dir / "truth.tpsq")
        dataset.append((truth, load_measurements(cell_dir / "measurements.jsonl")))
    config = TrainConfig(
        window=int(opts["window"]),
        steps=int(opts["train_steps"]),
        batch_size=int(opts["batch_size"]),
        dropout=float(opts["dropout"]),
        learning_rate=float(opts["learning_rate"]),
        seed=int(opts["seed"]),
        layout=opts["layout"],
        angular_velocity=bool(opts["angular_velocity"]),
    )
    resume = load_checkpoint(Path(opts["resume"])) if opts["resume"] else None
    result = train_denoiser(dataset, config, resume=resume)
    out = Path(opts["out"])
    save_checkpoint(out, result)
    write_loss_curve(out.with_suffix(".loss.csv"), result.losses)
    _echo(out.parent, args.cmd, opts)
    rows = [["step", str(result.step)], ["parameters", str(result.denoiser.parameter_count())]]
    if result.losses:
        rows.append(["first loss", f"{result.losses[0][1]:.5f}"])
        rows.append(["last loss", f"{result.losses[-1][1]:.5f}"])
    _print_table("Training", ["Key", "Value"], rows)
    return EXIT_OK


def cmd_infer(args) -> int:
    opts = _options(args)
    if opts["cell"]:
        cell = Path(opts["cell"])
        opts["measurements"] = opts["measurements"] or str(cell / "measurements.jsonl")
        opts["skeleton"] = opts["skeleton"] or str(_cell_skeleton(cell))
        opts["out"] = opts["out"] or str(cell / "pred.tpsq")
    _require(opts, "measurements", "out")
    if bool(opts["checkpoint"]) == bool(opts["oracle"]):
        raise UsageError("pass exactly one of --checkpoint or --oracle")
    measurements = load_measurements(Path(opts["measurements"]))
    skeleton = load_skeleton(Path(opts["skeleton"])) if opts["skeleton"] else default_skeleton()
    if opts["checkpoint"]:
        denoiser = load_checkpoint(Path(opts["checkpoint"])).denoiser
    else:
        denoiser = oracle_denoiser(load_poses(Path(opts["oracle"])), SigmaRule())
    rule = denoiser.sigma_rule
    schedule = make_schedule(int(opts["steps"]), rule.T, rule)
    estimate = run_inference(
        measurements,
        skeleton,
        denoiser,
        schedule,
        _guidance(opts),
        int(opts["seed"]),
        workers=load_settings().workers,
    )
    out = Path(opts["out"])
    save_poses(out, estimate)
    _echo(out.parent, args.cmd, opts)
    logger.info("wrote %d frames to %s", estimate.frames, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    opts = _options(args)
    _require(opts, "pred", "truth")
    cells = []
    if opts["manifest"]:
        pred_dir, truth_dir = Path(opts["pred"]), Path(opts["truth"])
        for cell in expand_manifest(load_manifest(Path(opts["manifest"]))):
            skeleton = load_skeleton(truth_dir / cell.name / "skeleton.json")
            believed = load_skeleton(_cell_skeleton(truth_dir / cell.name))
            cells.append(
                evaluate_cell(
                    cell.name,
                    Posed(load_poses(pred_dir / cell.name / "pred.tpsq"), believed),
                    Posed(load_poses(truth_dir / cell.name / "truth.tpsq"), skeleton),
                    scale=cell.preset.uniform_factor or 1.0,
                    sigma_l=cell.sigma_l,
                    sigma_r=cell.sigma_r,
                    sigma_b=cell.sigma_b,
                    preset=cell.preset.name,
                )
            )
    else:
        skeleton = load_skeleton(Path(opts["skeleton"])) if opts["skeleton"] else default_skeleton()
        cells.append(
            evaluate_cell(
                Path(opts["pred"]).stem,
                Posed(load_poses(Path(opts["pred"])), skeleton),
                Posed(load_poses(Path(opts["truth"])), skeleton),
                scale=float(opts["scale"]),
            )
        )
    report = build_report(cells)
    out = Path(opts["out"])
    write_report(report, out)
    _echo(out, args.cmd, opts)
    _print_table(
        "Evaluation",
        ["Cell", "MPJPE cm", "MPJRE deg", "UPE cm", "LPE cm"],
        [
            [c.name, f"{c.mpjpe:.3f}", f"{c.mpjre:.3f}", f"{c.upe:.3f}", f"{c.lpe:.3f}"]
            for c in report.cells
        ],
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    opts = _options(args)
    hook = None
    if opts["inject_sign_error"]:
        parts = str(opts["inject_sign_error"]).split(",")
        if len(parts) != 2:
            raise UsageError("--inject-sign-error expects two entry names, e.g. R13,r2")
        hook = sign_error_hook(parts[0].strip(), parts[1].strip())
    result = run_verification(
        samples=int(opts["samples"]),
        points=int(opts["points"]),
        seed=int(opts["seed"]),
        workers=load_settings().workers,
        partitions=int(opts["partitions"]),
        hook=hook,
    )
    for suite in result.suites:
        status = "ok" if suite.valid else "FAILED"
        _print_table(f"{suite.name}: {status}", ["Check", "Value"], suite.rows)
    for error in result.errors:
        console.print(f"[red]{error}[/red]")
    out = Path(opts["out"] or Path(load_settings().data_dir) / "verify")
    write_json(
        out / "verification.json",
        {
            "valid": result.valid,
            "errors": result.errors,
            "suites": [
                {
                    "name": s.name,
                    "valid": s.valid,
                    "errors": s.errors,
                    "rows": s.rows,
                    "z_threshold": s.z_threshold,
                }
                for s in result.suites
            ],
        },
    )
    _echo(out, args.cmd, opts)
    return EXIT_OK if result.valid else EXIT_FAILED


def cmd_benchmark(args) -> int:
    opts = _options(args)
    _require(opts, "manifest", "checkpoint")
    cells = expand_manifest(load_manifest(Path(opts["manifest"])))
    guided = load_checkpoint(Path(opts["checkpoint"])).denoiser
    baseline = None
    if opts["baseline_checkpoint"]:
        baseline = load_checkpoint(Path(opts["baseline_checkpoint"])).denoiser
    rule = guided.sigma_rule
    schedule = make_schedule(int(opts["steps"]), rule.T, rule)
    metrics = run_benchmark(
        cells,
        default_skeleton(),
        guided,
        schedule,
        _guidance(opts),
        baseline=baseline,
        seed=int(opts["seed"]),
        workers=load_settings().workers,
    )
    report = build_report(metrics)
    out = Path(opts["out"])
    write_report(report, out)
    trends = summarize_trends(report)
    write_json(out / "trends.json", trends.model_dump())
    _echo(out, args.cmd, opts)
    _print_table(
        "Scale trend",
        ["Method", "Flatness (max/min)", "Degradation vs 1.0"],
        [[t.method, f"{t.flatness:.3f}", f"{t.degradation:.3f}"] for t in trends.scale],
    )
    noise_rows = [
        [t.axis, t.method, f"{t.increase:.3f}", f"{t.rotation_increase:.3f}"]
        for t in (*trends.noise, *trends.rotation_noise, *trends.bone_noise)
    ]
    _print_table(
        "Noise trends", ["Axis", "Method", "MPJPE increase cm", "MPJRE increase deg"], noise_rows
    )
    return EXIT_OK


def _add_sampler_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--steps", type=int, help="Sampling steps N")
    parser.add_argument("--eta", type=float, help="DDIM stochasticity in [0, 1]")
    parser.add_argument("--guidance-scale", type=float, help="Likelihood score scale, 0 disables")
    parser.add_argument("--covariance-mode", choices=["identity", "closed_form"])
    parser.add_argument("--cfg-weight", type=float)
    parser.add_argument(
        "--score-weight", choices=["variance", "unit"], help="Scaling of the score per step"
    )
    parser.add_argument("--sigma-l", type=float, help="Override measurement noise in the score")
    parser.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tripose")
    sub = parser.add_subparsers(dest="cmd", required=True)

    gen = sub.add_parser("gen-data", help="Generate synthetic cells from a manifest")
    gen.add_argument("--manifest")
    gen.add_argument("--out", help="Output directory (default TRIPOSE_DATA_DIR)")
    gen.add_argument("--skeleton", help="Rest skeleton JSON (default: packaged skeleton)")
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="Train a conditional denoiser")
    train.add_argument("--data", help="Directory written by gen-data")
    train.add_argument("--out", help="Checkpoint path")
    train.add_argument("--resume", help="Checkpoint to continue from")
    train.add_argument("--window", type=int)
    train.add_argument("--train-steps", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--dropout", type=float, help="Conditioning dropout probability")
    train.add_argument("--learning-rate", type=float)
    train.add_argument("--layout", choices=["rotations", "rotations+locations"])
    train.add_argument("--angular-velocity", action="store_true", default=None)
    train.add_argument("--seed", type=int)
    train.set_defaults(func=cmd_train)

    infer = sub.add_parser("infer", help="Estimate poses from measurements")
    infer.add_argument("--measurements")
    infer.add_argument("--skeleton")
    infer.add_argument("--cell", help="gen-data cell directory supplying default paths")
    infer.add_argument("--checkpoint")
    infer.add_argument("--oracle", help="Ground-truth pose file for the oracle denoiser")
    infer.add_argument("--out")
    _add_sampler_flags(infer)
    infer.set_defaults(func=cmd_infer)

    evaluate = sub.add_parser("eval", help="Score predictions against ground truth")
    evaluate.add_argument("--pred")
    evaluate.add_argument("--truth")
    evaluate.add_argument("--skeleton")
    evaluate.add_argument("--manifest")
    evaluate.add_argument("--scale", type=float)
    evaluate.add_argument("--out")
    evaluate.set_defaults(func=cmd_eval)

    verify = sub.add_parser("verify", help="Check the closed-form formulas numerically")
    verify.add_argument("--samples", type=int)
    verify.add_argument("--points", type=int)
    verify.add_argument("--partitions", type=int)
    verify.add_argument("--seed", type=int)
    verify.add_argument("--inject-sign-error", help=argparse.SUPPRESS)
    verify.add_argument("--out")
    verify.set_defaults(func=cmd_verify)

    bench = sub.add_parser("benchmark", help="Run guided and baseline inference over a manifest")
    bench.add_argument("--manifest")
    bench.add_argument("--checkpoint")
    bench.add_argument("--baseline-checkpoint")
    bench.add_argument("--out")
    _add_sampler_flags(bench)
    bench.set_defaults(func=cmd_benchmark)

    for subparser in sub.choices.values():
        subparser.add_argument("--config", help="JSON file of option defaults")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        settings = load_settings()
    except RuntimeError as exc:
        print(f"tripose {args.cmd}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    setup_logging(settings.log_level)
    try:
        return args.func(args)
    except DivergenceError as exc:
        logger.error("%s", exc)
        return EXIT_FAILED
    except (ValueError, CapabilityError) as exc:
        print(f"tripose {args.cmd}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
