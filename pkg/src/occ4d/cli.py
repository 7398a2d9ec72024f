"""Command-line verbs: make-data, train-tokenizer, train-diffusion, generate, eval, render."""
from __future__ import annotations

import argparse
import logging
from dataclasses import replace
from pathlib import Path

import torch
from rich.console import Console
from rich.table import Table

from .config import load_config, worker_count
from .errors import ConfigError, Occ4dError
from .occupancy import Trajectory
from .toyworld import TrajectoryKind, make_trajectory
from . import training

logger = logging.getLogger(__name__)
console = Console()


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occ4d", description="Trajectory-conditioned 4D occupancy generation")
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL (DEBUG, INFO, WARNING, ...)")
    sub = parser.add_subparsers(dest="command", required=True)

    def _with_config(p):
        p.add_argument("--config", type=Path, required=True, help="Experiment YAML file")
        return p

    _with_config(sub.add_parser("make-data", help="Generate the toy-world dataset"))

    p = _with_config(sub.add_parser("train-tokenizer", help="Train the occupancy tokenizer"))
    p.add_argument("--steps", type=int, default=None, help="Overrides optim.tokenizer_steps")
    p.add_argument("--resume", action="store_true", help="Continue from the saved checkpoint")
    p.add_argument("--dry-run", action="store_true", help="Check shapes and run a single step")

    p = _with_config(sub.add_parser("train-diffusion", help="Train the trajectory-conditioned denoiser"))
    p.add_argument("--tokenizer", type=Path, default=None, help="Tokenizer checkpoint (default: paths.checkpoint_dir)")
    p.add_argument("--steps", type=int, default=None, help="Overrides optim.diffusion_steps")
    p.add_argument("--resume", action="store_true", help="Continue from the saved checkpoint")
    p.add_argument("--dry-run", action="store_true", help="Check shapes and run a single step")

    p = _with_config(sub.add_parser("generate", help="Sample an occupancy clip for a trajectory"))
    p.add_argument("--tokenizer", type=Path, default=None)
    p.add_argument("--denoiser", type=Path, default=None)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--trajectory", help="Trajectory kind, e.g. straight or turn_right:yaw_rate=0.5")
    source.add_argument("--trajectory-file", type=Path, help="CSV with T rows of x,y")
    p.add_argument("--steps", type=int, default=None, help="Diffusion steps G (default: schedule.steps)")
    p.add_argument("--ratio", type=float, default=1.0, help="Fraction of reverse steps to execute")
    p.add_argument("--seed", type=int, default=None, help="Noise seed (default: config seed)")
    p.add_argument("--out", type=Path, default=None, help="Output .occv path")
    p.add_argument("--render", action="store_true", help="Also write one PPM per frame")

    p = _with_config(sub.add_parser("eval", help="Reconstruction and generation metrics"))
    p.add_argument("--tokenizer", type=Path, default=None)
    p.add_argument("--denoiser", type=Path, default=None)
    p.add_argument("--n-gen", type=int, default=16, help="Generated clips per FID-proxy row")
    p.add_argument("--out", type=Path, default=None, help="Metrics report path (.json)")
    p.add_argument("--sweep-ratio", type=_float_list, default=None, help="e.g. 0.1,0.5,1.0")
    p.add_argument("--sweep-steps", type=_int_list, default=None, help="e.g. 10,100,1000")

    p = sub.add_parser("render", help="Write bird's-eye PPM frames of an OCCV clip")
    p.add_argument("clip", type=Path)
    p.add_argument("--out", type=Path, default=None, help="Frame directory (default: next to the clip)")
    return parser


def _trajectory(args, cfg) -> Trajectory:
    T = cfg.world.dims[0]
    if args.trajectory_file is not None:
        return Trajectory.from_csv(args.trajectory_file)
    try:
        kind = TrajectoryKind.parse(args.trajectory)
    except ValueError as e:
        raise ConfigError(f"--trajectory: {e}") from None
    return make_trajectory(kind, T, cfg.world.dt)


def _print_table(title: str, rows: list[tuple[str, str]]) -> None:
    table = Table(title=title)
    table.add_column("Item")
    table.add_column("Value")
    for key, value in rows:
        table.add_row(key, value)
    console.print(table)


def cmd_make_data(args) -> None:
    cfg = load_config(args.config)
    manifest, count = training.run_make_data(cfg)
    _print_table("make-data", [("manifest", str(manifest)), ("clips", str(count))])


def cmd_train_tokenizer(args) -> None:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg = replace(cfg, optim=replace(cfg.optim, tokenizer_steps=args.steps))
    path = training.run_train_tokenizer(cfg, resume=args.resume, dry_run=args.dry_run)
    if path is not None:
        _print_table("train-tokenizer", [("checkpoint", str(path))])


def cmd_train_diffusion(args) -> None:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg = replace(cfg, optim=replace(cfg.optim, diffusion_steps=args.steps))
    path = training.run_train_diffusion(cfg, args.tokenizer, resume=args.resume, dry_run=args.dry_run)
    if path is not None:
        _print_table("train-diffusion", [("checkpoint", str(path))])


def cmd_generate(args) -> None:
    cfg = load_config(args.config)
    if not 0 < args.ratio <= 1:
        raise ConfigError(f"--ratio must lie in (0, 1], got {args.ratio}")
    traj = _trajectory(args, cfg)
    pipeline = training.load_pipeline(cfg, args.tokenizer, args.denoiser)
    seed = cfg.seed if args.seed is None else args.seed
    out = args.out or cfg.paths.output_root / f"generated_seed{seed}.occv"
    path = training.run_generate(cfg, traj, out, args.steps, args.ratio, seed, args.render, pipeline)
    _print_table("generate", [("clip", str(path))])


def cmd_eval(args) -> None:
    cfg = load_config(args.config)
    out = args.out or cfg.paths.output_root / "metrics.json"
    path = training.run_eval(
        cfg, out, args.n_gen, args.sweep_ratio, args.sweep_steps,
        tokenizer_path=args.tokenizer, denoiser_path=args.denoiser,
    )
    _print_table("eval", [("report", str(path))])


def cmd_render(args) -> None:
    frames = training.run_render(args.clip, args.out)
    _print_table("render", [("frames", str(len(frames))), ("directory", str(frames[0].parent))])


COMMANDS = {
    "make-data": cmd_make_data,
    "train-tokenizer": cmd_train_tokenizer,
    "train-diffusion": cmd_train_diffusion,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "render": cmd_render,
}


def main(argv: list[str] | None = None) -> int:
    """Runs one verb; returns 0 on success, 2/3/4 for config, data and numerical errors."""
    args = build_parser().parse_args(argv)
    if args.log_level:
        logging.getLogger().setLevel(args.log_level.upper())
    try:
        torch.set_num_threads(worker_count())
        COMMANDS[args.command](args)
    except Occ4dError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=logger.isEnabledFor(logging.DEBUG))
        return e.exit_code
    return 0
