"""Ancestral sampling of token grids and the noise + trajectory -> occupancy pipeline."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .diffusion import Denoiser, DiffusionSchedule, FlatTokens, mean_from_eps, model_outputs
from .errors import ConfigError, NumericalError
from .occupancy import OccupancySequence, Trajectory
from .tokenizer import Codebook, OccupancyTokenizer, TokenGrid, decode, logits_to_sequence, quantize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplingSpec:
    steps_G: int
    trajectory: Trajectory
    denoise_ratio: float = 1.0
    seed: int = 0
    snap_to_codebook: bool = True

    def __post_init__(self):
        if self.steps_G < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps_G}")
        if not 0 < self.denoise_ratio <= 1:
            raise ConfigError(f"ratio must lie in (0, 1], got {self.denoise_ratio}")

    @property
    def executed_steps(self) -> int:
        """ceil(r * G), robust to float noise in r * G."""
        return max(1, math.ceil(round(self.denoise_ratio * self.steps_G, 9)))

    def for_sample(self, index: int) -> "SamplingSpec":
        """Settings of the ``index``-th sample of a batch: its own RNG stream."""
        return replace(self, seed=self.seed + index)


@torch.no_grad()
def sample_flat(spec: SamplingSpec, model: Denoiser, schedule: DiffusionSchedule) -> FlatTokens:
    """
    Runs reverse steps g = G .. G - n + 1 (n = ceil(r * G)) from unit Gaussian noise.
    The last executed step injects no noise.
    """
    if spec.steps_G != schedule.G:
        raise ConfigError(f"Sampling settings ask for G={spec.steps_G}, schedule has G={schedule.G}")
    cfg = model.cfg
    dtype = model.input_proj.weight.dtype
    generator = torch.Generator().manual_seed(spec.seed)
    x = torch.randn((1, cfg.token_channels, cfg.num_positions), generator=generator, dtype=dtype)
    traj = torch.from_numpy(spec.trajectory.positions.astype(np.float64)).unsqueeze(0).to(dtype)

    was_training = model.training
    model.eval()
    try:
        final = schedule.G - spec.executed_steps + 1
        for g in range(schedule.G, final - 1, -1):
            steps = torch.tensor([g])
            eps, logvar = model_outputs(model, x, traj, steps, schedule)
            mean = mean_from_eps(x, eps, steps, schedule)
            if g == final:
                x = mean
                break
            if logvar is None:
                logvar = torch.log(schedule.gather("posterior_variance", steps, x)).expand_as(x)
            z = torch.randn(x.shape, generator=generator, dtype=dtype)
            x = mean + torch.exp(0.5 * logvar) * z
    finally:
        model.train(was_training)

    if not torch.isfinite(x).all():
        raise NumericalError(f"Sampling produced non-finite tokens (seed {spec.seed})")
    return FlatTokens(x[0], cfg.token_grid)


def sample_tokens(
    spec: SamplingSpec,
    model: Denoiser,
    schedule: DiffusionSchedule,
    codebook: Codebook | None = None,
) -> TokenGrid:
    """Samples a token grid; snaps it to ``codebook`` when given and snapping is enabled."""
    values = sample_flat(spec, model, schedule).unflatten()
    if codebook is not None and spec.snap_to_codebook:
        return quantize(values.to(codebook.codes.dtype), codebook)
    return TokenGrid(values)


@torch.no_grad()
def generate_clip(
    spec: SamplingSpec,
    tokenizer: OccupancyTokenizer,
    model: Denoiser,
    schedule: DiffusionSchedule,
) -> OccupancySequence:
    """Samples tokens for ``spec.trajectory`` and decodes them to an occupancy clip."""
    tokens = sample_tokens(spec, model, schedule, tokenizer.codebook)
    was_training = tokenizer.training
    tokenizer.eval()
    try:
        logits = decode(tokens, tokenizer)
    finally:
        tokenizer.train(was_training)
    return logits_to_sequence(logits, tokenizer.cfg.num_classes)
