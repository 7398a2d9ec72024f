"""
Orchestration of the two training stages, generation and evaluation.

Each ``run_*`` function takes a validated :class:`RunConfig` and returns the
path of the artifact it wrote; the CLI is a thin layer over these.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn

from .checkpoint import DENOISER_MAGIC, TOKENIZER_MAGIC, load_checkpoint, restore, save_checkpoint
from .config import RunConfig, worker_count
from .diffusion import (
    Denoiser,
    DenoiserConfig,
    DiffusionSchedule,
    diffusion_train_step,
    flatten_tokens,
)
from .errors import ConfigError, DataError
from .export import DIFFUSION_LOSS_HEADER, TOKENIZER_LOSS_HEADER, LossLog, write_metrics_report, write_rows
from .metrics import FeatureAccumulator, FeatureStats, class_miou, extract_features, fid_proxy, occupancy_iou
from .nn_utils import labels_to_tensor, make_optimizer, seed_everything
from .occupancy import OccupancySequence, Trajectory, read_clip, render_frames, write_clip
from .sampler import SamplingSpec, generate_clip
from .tokenizer import OccupancyTokenizer, TokenizerConfig, encode, quantize, reconstruct, tokenizer_train_step, voxel_accuracy
from .toyworld import MANIFEST_NAME, ManifestRow, generate_dataset, read_manifest

logger = logging.getLogger(__name__)


def _progress() -> Progress:
    return Progress(
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TextColumn("{task.fields[loss]}"),
        TimeElapsedColumn(),
    )


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    rows: list[ManifestRow]
    clips: list[OccupancySequence]
    trajectories: list[Trajectory]
    train_idx: np.ndarray
    holdout_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.clips)

    def labels(self, idx) -> torch.Tensor:
        return labels_to_tensor([self.clips[i] for i in idx])


def split_indices(n: int, holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Seeded train/held-out split. With too few clips to hold any out, the
    training clips double as the evaluation set.
    """
    order = np.random.default_rng(seed).permutation(n)
    n_hold = int(np.floor(n * holdout_fraction))
    if n_hold == 0 or n_hold == n:
        return np.sort(order), np.sort(order)
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def load_dataset(cfg: RunConfig) -> Dataset:
    data_dir = Path(cfg.paths.data_dir)
    manifest = data_dir / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"No dataset manifest at {manifest}; run make-data first")
    rows = read_manifest(manifest)
    if not rows:
        raise DataError(f"{manifest} lists no clips")
    clips, trajs = [], []
    for row in rows:
        seq, traj = read_clip(data_dir / row.file)
        if seq.dims != cfg.world.dims:
            raise DataError(f"{row.file}: dims {seq.dims} do not match world.dims {cfg.world.dims}")
        clips.append(seq)
        trajs.append(traj)
    train_idx, holdout_idx = split_indices(len(rows), cfg.data.holdout_fraction, cfg.seed)
    logger.info(f"Loaded {len(rows)} clips ({len(train_idx)} train, {len(holdout_idx)} held out)")
    return Dataset(rows, clips, trajs, train_idx, holdout_idx)


def run_make_data(cfg: RunConfig) -> tuple[Path, int]:
    data_dir = Path(cfg.paths.data_dir)
    rows = generate_dataset(
        cfg.world,
        cfg.data.trajectory_kinds(),
        cfg.data.clips_per_kind,
        data_dir,
        max_workers=worker_count(),
    )
    return data_dir / MANIFEST_NAME, len(rows)


def _batch_indices(pool: np.ndarray, batch_size: int, generator: torch.Generator) -> np.ndarray:
    picks = torch.randint(0, len(pool), (batch_size,), generator=generator).numpy()
    return pool[picks]


# ---------------------------------------------------------------- tokenizer


def _checkpoint_config(cfg: RunConfig) -> dict:
    return {"run": cfg.to_dict(), "config_hash": cfg.config_hash()}


def _check_hash(ckpt, cfg: RunConfig, path: Path) -> None:
    stored = ckpt.config.get("config_hash")
    if stored != cfg.config_hash():
        raise DataError(
            f"{path.name} was trained with config hash {str(stored)[:12]}, "
            f"current config hashes to {cfg.config_hash()[:12]}"
        )


def load_tokenizer(path: Path, cfg: RunConfig | None = None) -> OccupancyTokenizer:
    """Tokenizer from an OTK1 checkpoint; with ``cfg`` the config hashes must agree."""
    path = Path(path)
    ckpt = load_checkpoint(path, TOKENIZER_MAGIC)
    if cfg is not None:
        _check_hash(ckpt, cfg, path)
    model = OccupancyTokenizer(TokenizerConfig(**ckpt.config["run"]["tokenizer"]))
    restore(ckpt, model)
    model.eval()
    return model


@dataclass
class ReconstructionScores:
    iou: float
    miou: float
    accuracy: float
    per_class: dict[int, float]


def evaluate_reconstruction(model: OccupancyTokenizer, clips: list[OccupancySequence]) -> ReconstructionScores:
    """Mean IoU, mIoU and voxel accuracy over ``clips``; per-class IoU averaged where present."""
    ious, mious, accs = [], [], []
    per_class: dict[int, list[float]] = {}
    for seq in clips:
        recon = reconstruct(seq, model)
        ious.append(occupancy_iou(recon, seq))
        scores, miou = class_miou(recon, seq)
        mious.append(miou)
        accs.append(voxel_accuracy(recon, seq))
        for k, v in scores.items():
            per_class.setdefault(k, []).append(v)
    return ReconstructionScores(
        iou=float(np.mean(ious)),
        miou=float(np.mean(mious)),
        accuracy=float(np.mean(accs)),
        per_class={k: float(np.mean(v)) for k, v in sorted(per_class.items())},
    )


def run_train_tokenizer(cfg: RunConfig, resume: bool = False, dry_run: bool = False) -> Path | None:
    dataset = load_dataset(cfg)
    generator = seed_everything(cfg.seed)
    model = OccupancyTokenizer(cfg.tokenizer)
    optimizer = make_optimizer(model.parameters(), cfg.optim.lr, cfg.optim.weight_decay)
    ckpt_path = cfg.paths.tokenizer_checkpoint

    if dry_run:
        batch = dataset.labels(dataset.train_idx[: cfg.optim.batch_size])
        expected = cfg.token_dims
        with torch.no_grad():
            latent = model.encode(batch)
        if tuple(latent.shape[1:]) != expected:
            raise DataError(f"Encoder produced {tuple(latent.shape[1:])}, expected {expected}")
        record = tokenizer_train_step(batch, model, optimizer, cfg.optim.lr, 0, generator)
        logger.info(f"Dry run ok: token grid {expected}, loss {record.total:.4f}")
        return None

    start = 0
    if resume:
        ckpt = load_checkpoint(ckpt_path, TOKENIZER_MAGIC)
        _check_hash(ckpt, cfg, ckpt_path)
        restore(ckpt, model, optimizer, generator, restore_rng=True)
        start = ckpt.step
        logger.info(f"Resuming tokenizer training at step {start}")

    total_steps = cfg.optim.tokenizer_steps
    log = LossLog(cfg.paths.output_root / "tokenizer_loss.csv", TOKENIZER_LOSS_HEADER, resume_from=start if resume else None)
    holdout = [dataset.clips[i] for i in dataset.holdout_idx]

    def _save(step: int) -> None:
        save_checkpoint(
            ckpt_path, TOKENIZER_MAGIC, model, _checkpoint_config(cfg), optimizer,
            meta={"step": step, "stage": "tokenizer"}, generator=generator,
        )

    with _progress() as progress:
        task = progress.add_task("tokenizer", total=total_steps, completed=start, loss="")
        for step in range(start, total_steps):
            idx = _batch_indices(dataset.train_idx, cfg.optim.batch_size, generator)
            record = tokenizer_train_step(dataset.labels(idx), model, optimizer, cfg.optim.lr, step, generator)
            log.append(record)
            progress.update(task, advance=1, loss=f"loss {record.total:.4f}")
            done = step + 1
            if done % cfg.optim.eval_interval == 0 or done == total_steps:
                scores = evaluate_reconstruction(model, holdout)
                logger.info(
                    f"step {done}: held-out IoU {scores.iou:.4f} mIoU {scores.miou:.4f} "
                    f"voxel accuracy {scores.accuracy:.4f}"
                )
            if done % cfg.optim.checkpoint_interval == 0 and done != total_steps:
                _save(done)
    _save(total_steps)
    return ckpt_path


# ---------------------------------------------------------------- token cache


def _cache_key(cfg: RunConfig, tokenizer_path: Path) -> np.ndarray:
    manifest = Path(cfg.paths.data_dir) / MANIFEST_NAME
    return np.array([manifest.stat().st_mtime_ns, Path(tokenizer_path).stat().st_mtime_ns], dtype=np.int64)


@torch.no_grad()
def cached_tokens(cfg: RunConfig, dataset: Dataset, tokenizer: OccupancyTokenizer, tokenizer_path: Path) -> torch.Tensor:
    """
    (N, c, M) quantized tokens of every clip, cached next to the dataset.

    The cache is reused while the manifest and tokenizer checkpoint mtimes and the
    config hash are unchanged.
    """
    config_hash = cfg.config_hash()
    cache = Path(cfg.paths.data_dir) / f"tokens_{config_hash[:16]}.npz"
    key = _cache_key(cfg, tokenizer_path)
    if cache.exists():
        with np.load(cache, allow_pickle=False) as stored:
            if str(stored["config_hash"]) == config_hash and np.array_equal(stored["key"], key):
                logger.info(f"Reusing token cache {cache.name}")
                return torch.from_numpy(stored["tokens"])
        logger.warning(f"Token cache {cache.name} is stale; re-encoding")

    tokenizer.eval()
    tokens = []
    for seq in dataset.clips:
        grid = quantize(encode(seq, tokenizer), tokenizer.codebook)
        tokens.append(flatten_tokens(grid).values.float().numpy())
    array = np.stack(tokens)
    np.savez(cache, tokens=array, key=key, config_hash=np.array(config_hash))
    logger.info(f"Encoded {len(tokens)} clips into {cache.name}")
    return torch.from_numpy(array)


# ---------------------------------------------------------------- diffusion


def load_denoiser(path: Path, cfg: RunConfig | None = None) -> Denoiser:
    """Denoiser from an ODM1 checkpoint; with ``cfg`` the config hashes must agree."""
    path = Path(path)
    ckpt = load_checkpoint(path, DENOISER_MAGIC)
    if cfg is not None:
        _check_hash(ckpt, cfg, path)
    model = Denoiser(DenoiserConfig(**ckpt.config["denoiser"]))
    restore(ckpt, model)
    model.eval()
    return model


def run_train_diffusion(
    cfg: RunConfig,
    tokenizer_path: Path | None = None,
    resume: bool = False,
    dry_run: bool = False,
) -> Path | None:
    tokenizer_path = Path(tokenizer_path or cfg.paths.tokenizer_checkpoint)
    tokenizer = load_tokenizer(tokenizer_path, cfg)
    dataset = load_dataset(cfg)
    tokens = cached_tokens(cfg, dataset, tokenizer, tokenizer_path)
    trajs = torch.from_numpy(np.stack([t.positions for t in dataset.trajectories]).astype(np.float32))

    generator = seed_everything(cfg.seed)
    model = Denoiser(cfg.diffusion)
    schedule = DiffusionSchedule.from_config(cfg.schedule)
    optimizer = make_optimizer(model.parameters(), cfg.optim.lr, cfg.optim.weight_decay)
    ckpt_path = cfg.paths.denoiser_checkpoint
    simple_steps = cfg.optim.simple_steps
    if not cfg.diffusion.learn_sigma and simple_steps < cfg.optim.diffusion_steps:
        logger.warning("diffusion.learn_sigma is off; training on L_simple for every step")
        simple_steps = cfg.optim.diffusion_steps

    def _step(step: int):
        idx = _batch_indices(dataset.train_idx, cfg.optim.batch_size, generator)
        stage = "simple" if step < simple_steps else "full"
        return diffusion_train_step(
            tokens[idx], trajs[idx], model, optimizer, schedule, stage, cfg.optim.lr,
            generator=generator, vlb_weight=cfg.optim.vlb_weight, step=step,
        )

    if dry_run:
        record = _step(0)
        logger.info(f"Dry run ok: {tokens.shape[0]} token grids of shape {tuple(tokens.shape[1:])}, loss {record.total:.4f}")
        return None

    start = 0
    if resume:
        ckpt = load_checkpoint(ckpt_path, DENOISER_MAGIC)
        _check_hash(ckpt, cfg, ckpt_path)
        restore(ckpt, model, optimizer, generator, restore_rng=True)
        start = ckpt.step
        logger.info(f"Resuming diffusion training at step {start}")

    config = {**_checkpoint_config(cfg), "denoiser": asdict(cfg.diffusion)}

    def _save(step: int) -> None:
        save_checkpoint(
            ckpt_path, DENOISER_MAGIC, model, config, optimizer,
            meta={"step": step, "stage": "diffusion", "simple_steps": simple_steps}, generator=generator,
        )

    total_steps = cfg.optim.diffusion_steps
    log = LossLog(cfg.paths.output_root / "diffusion_loss.csv", DIFFUSION_LOSS_HEADER, resume_from=start if resume else None)
    with _progress() as progress:
        task = progress.add_task("diffusion", total=total_steps, completed=start, loss="")
        for step in range(start, total_steps):
            if step == simple_steps and step > 0:
                logger.info(f"step {step}: switching to the combined L_simple + L_vlb objective")
            record = _step(step)
            log.append(record)
            progress.update(task, advance=1, loss=f"{record.stage} {record.total:.4f}")
            done = step + 1
            if done % cfg.optim.checkpoint_interval == 0 and done != total_steps:
                _save(done)
    _save(total_steps)
    return ckpt_path


# ---------------------------------------------------------------- generation


@dataclass
class Pipeline:
    tokenizer: OccupancyTokenizer
    denoiser: Denoiser
    schedule: DiffusionSchedule


def load_pipeline(cfg: RunConfig, tokenizer_path: Path | None = None, denoiser_path: Path | None = None) -> Pipeline:
    tokenizer = load_tokenizer(tokenizer_path or cfg.paths.tokenizer_checkpoint, cfg)
    denoiser = load_denoiser(denoiser_path or cfg.paths.denoiser_checkpoint, cfg)
    return Pipeline(tokenizer, denoiser, DiffusionSchedule.from_config(cfg.schedule))


def schedule_for(pipeline: Pipeline, cfg: RunConfig, steps: int | None) -> DiffusionSchedule:
    if steps is None or steps == pipeline.schedule.G:
        return pipeline.schedule
    return DiffusionSchedule.from_config(cfg.schedule, steps=steps)


def run_generate(
    cfg: RunConfig,
    trajectory: Trajectory,
    out: Path,
    steps: int | None = None,
    ratio: float = 1.0,
    seed: int | None = None,
    render: bool = False,
    pipeline: Pipeline | None = None,
) -> Path:
    if len(trajectory) != cfg.world.dims[0]:
        raise DataError(f"Trajectory has {len(trajectory)} positions, clips have T={cfg.world.dims[0]} frames")
    pipeline = pipeline or load_pipeline(cfg)
    schedule = schedule_for(pipeline, cfg, steps)
    spec = SamplingSpec(schedule.G, trajectory, ratio, cfg.seed if seed is None else seed)
    seq = generate_clip(spec, pipeline.tokenizer, pipeline.denoiser, schedule)
    out = write_clip(seq, trajectory, Path(out))
    logger.info(f"Generated {out.name} with G={schedule.G}, ratio={ratio}, seed={spec.seed}")
    if render:
        frames = render_frames(seq, out.with_suffix(""))
        logger.info(f"Rendered {len(frames)} frames to {out.with_suffix('')}")
    return out


def run_render(clip_path: Path, out_dir: Path | None = None) -> list[Path]:
    clip_path = Path(clip_path)
    seq, _ = read_clip(clip_path)
    return render_frames(seq, out_dir or clip_path.with_suffix(""))


# ---------------------------------------------------------------- evaluation


def generated_features(
    pipeline: Pipeline,
    schedule: DiffusionSchedule,
    trajectories: list[Trajectory],
    n_gen: int,
    ratio: float,
    seed: int,
) -> FeatureStats:
    """Feature statistics of ``n_gen`` samples; sample ``i`` uses seed ``seed + i``."""
    acc = FeatureAccumulator(pipeline.tokenizer.cfg.latent_channels)
    for i in range(n_gen):
        traj = trajectories[i % len(trajectories)]
        spec = SamplingSpec(schedule.G, traj, ratio, seed).for_sample(i)
        clip = generate_clip(spec, pipeline.tokenizer, pipeline.denoiser, schedule)
        acc.update(extract_features(clip, pipeline.tokenizer))
    return acc.stats()


def run_eval(
    cfg: RunConfig,
    out: Path,
    n_gen: int = 16,
    sweep_ratio: list[float] | None = None,
    sweep_steps: list[int] | None = None,
    pipeline: Pipeline | None = None,
    tokenizer_path: Path | None = None,
    denoiser_path: Path | None = None,
) -> Path:
    if n_gen < 2:
        raise ConfigError(f"n_gen must be >= 2 to estimate a covariance, got {n_gen}")
    pipeline = pipeline or load_pipeline(cfg, tokenizer_path, denoiser_path)
    dataset = load_dataset(cfg)
    tokenizer = pipeline.tokenizer
    vocab_names = dataset.clips[0].vocab.names

    scores = evaluate_reconstruction(tokenizer, dataset.clips)
    logger.info(f"Reconstruction IoU {scores.iou:.4f} mIoU {scores.miou:.4f}")

    real = FeatureStats.from_features(np.stack([extract_features(c, tokenizer) for c in dataset.clips]))
    # trajectories come from the dataset, in a seeded order
    order = np.random.default_rng(cfg.seed).permutation(len(dataset))
    trajectories = [dataset.trajectories[i] for i in order]

    sweep = []
    ratios = sweep_ratio or [1.0]
    step_values = sweep_steps or [pipeline.schedule.G]
    for steps in step_values:
        schedule = schedule_for(pipeline, cfg, steps)
        for ratio in ratios:
            gen = generated_features(pipeline, schedule, trajectories, n_gen, ratio, cfg.seed)
            fid = fid_proxy(real, gen)
            sweep.append({"steps": schedule.G, "ratio": ratio, "fid_proxy": fid})
            logger.info(f"G={schedule.G} ratio={ratio}: FID proxy {fid:.4f}")

    report = {
        "iou": scores.iou,
        "miou": scores.miou,
        "voxel_accuracy": scores.accuracy,
        "per_class": {vocab_names[k]: v for k, v in scores.per_class.items()},
        "n_real": real.count,
        "n_gen": n_gen,
        "sweep": sweep,
    }
    # headline score is the full chain at the configured G
    default_cell = [row for row in sweep if row["steps"] == pipeline.schedule.G and row["ratio"] == 1.0]
    if default_cell:
        report["fid_proxy"] = default_cell[0]["fid_proxy"]
    else:
        logger.info(f"Sweep has no G={pipeline.schedule.G}, ratio=1.0 cell; reporting the sweep only")
    out = Path(out)
    write_rows(sweep, out.with_name(f"{out.stem}_sweep.csv"))
    return write_metrics_report(report, out)
