from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from occ4d.diffusion import DenoiserConfig, DiffusionSchedule
from occ4d.occupancy import TOY_VOCAB, OccupancySequence, Trajectory
from occ4d.tokenizer import TokenizerConfig
from occ4d.toyworld import WorldConfig


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def tiny_world_cfg() -> WorldConfig:
    return WorldConfig(dims=(4, 8, 8, 2), n_static_obstacles=2, n_dynamic_cars=1, seed=3)


@pytest.fixture
def tiny_tokenizer_cfg() -> TokenizerConfig:
    return TokenizerConfig(
        num_classes=8, depth=2, class_embed_dim=2, levels=1,
        latent_channels=4, codebook_size=8, attn_groups=2, dropout=0.0,
    )


@pytest.fixture
def tiny_denoiser_cfg() -> DenoiserConfig:
    return DenoiserConfig(token_channels=4, token_grid=(2, 4, 4), traj_len=4, width=16, depth=2, heads=2)


@pytest.fixture
def schedule() -> DiffusionSchedule:
    return DiffusionSchedule.linear(20)


def random_clip(rng: np.random.Generator, dims=(4, 8, 8, 2), num_classes: int = TOY_VOCAB.size) -> OccupancySequence:
    return OccupancySequence(rng.integers(0, num_classes, size=dims).astype(np.uint8), TOY_VOCAB)


def random_trajectory(rng: np.random.Generator, T: int = 4) -> Trajectory:
    return Trajectory(np.cumsum(rng.normal(size=(T, 2)), axis=0))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def write_run_config(tmp_path: Path, **sections) -> Path:
    """A tiny experiment YAML under ``tmp_path``; keyword sections are merged on top."""
    raw = {
        "seed": 11,
        "world": {"dims": [4, 8, 8, 2], "n_static_obstacles": 2, "n_dynamic_cars": 1},
        "data": {"kinds": ["straight", "turn_right"], "clips_per_kind": 2, "holdout_fraction": 0.25},
        "tokenizer": {
            "levels": 1, "latent_channels": 4, "codebook_size": 8,
            "attn_groups": 2, "dropout": 0.0, "class_embed_dim": 2,
        },
        "diffusion": {"width": 16, "depth": 1, "heads": 2},
        "schedule": {"steps": 10},
        "optim": {
            "lr": 1.0e-3, "batch_size": 2, "tokenizer_steps": 4, "diffusion_steps": 5,
            "eval_interval": 2, "checkpoint_interval": 2,
        },
        "paths": {"data_dir": "data", "checkpoint_dir": "ckpt", "output_dir": "out"},
    }
    for name, value in sections.items():
        if isinstance(value, dict) and isinstance(raw.get(name), dict):
            raw[name] = {**raw[name], **value}
        else:
            raw[name] = value
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(raw), encoding="utf-8")
    return path
