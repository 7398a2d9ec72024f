"""
Trajectory-conditioned diffusion over flattened token grids.

Tokens (c, t', h', w') are flattened to (c, M) sequences, projected to the model
width and summed with a fixed sin/cos position table. Every transformer block is
modulated (shift, scale, gate) by the condition g = nu(step) + delta(trajectory).
The network predicts the injected noise and, optionally, an interpolation
coefficient for the reverse-process variance.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, NumericalError
from .nn_utils import check_finite_gradients, mean_flat, set_learning_rate
from .occupancy import Trajectory
from .tokenizer import TokenGrid

logger = logging.getLogger(__name__)

MAX_BETA = 0.999
# model time is the step rescaled to a 1000-step chain
TIME_SCALE = 1000.0


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 100
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"schedule.steps must be >= 1, got {self.steps}")
        if self.kind not in ("linear", "cosine"):
            raise ConfigError(f"schedule.kind must be 'linear' or 'cosine', got {self.kind!r}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError(
                f"schedule betas must satisfy 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )


class DiffusionSchedule:
    """
    Per-step constants of the forward process and its posterior.

    Arrays are float64 and 0-indexed; step g (1..G) lives at index g - 1.
    """

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("every beta must lie in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.alpha_bars_prev = np.append(1.0, self.alpha_bars[:-1])
        self.sqrt_alpha_bars = np.sqrt(self.alpha_bars)
        self.sqrt_one_minus_alpha_bars = np.sqrt(1.0 - self.alpha_bars)

        self.posterior_variance = betas * (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars)
        # posterior variance is 0 at g=1; reuse g=2 for the log
        clip_from = self.posterior_variance[1] if betas.size > 1 else betas[0]
        self.posterior_log_variance_clipped = np.log(np.append(clip_from, self.posterior_variance[1:]))
        self.posterior_mean_coef_x0 = betas * np.sqrt(self.alpha_bars_prev) / (1.0 - self.alpha_bars)
        self.posterior_mean_coef_xg = (1.0 - self.alpha_bars_prev) * np.sqrt(self.alphas) / (1.0 - self.alpha_bars)

    @property
    def G(self) -> int:
        return int(self.betas.size)

    @classmethod
    def linear(cls, G: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "DiffusionSchedule":
        """
        Linear betas from ``beta_start`` to ``beta_end``.

        The endpoints hold as given at G=1000; for any other G both are scaled by
        1000/G and every beta is clipped at 0.999.
        """
        scale = 1000.0 / G
        betas = np.linspace(scale * beta_start, scale * beta_end, G, dtype=np.float64)
        return cls(np.minimum(betas, MAX_BETA))

    @classmethod
    def cosine(cls, G: int, s: float = 0.008) -> "DiffusionSchedule":
        f = lambda t: math.cos((t + s) / (1 + s) * math.pi / 2) ** 2
        betas = [min(1 - f((i + 1) / G) / f(i / G), MAX_BETA) for i in range(G)]
        return cls(betas)

    @classmethod
    def from_config(cls, cfg: ScheduleConfig, steps: int | None = None) -> "DiffusionSchedule":
        G = steps or cfg.steps
        if cfg.kind == "cosine":
            return cls.cosine(G)
        return cls.linear(G, cfg.beta_start, cfg.beta_end)

    @classmethod
    def from_alpha_bars(cls, alpha_bars) -> "DiffusionSchedule":
        alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
        prev = np.append(1.0, alpha_bars[:-1])
        return cls(1.0 - alpha_bars / prev)

    def check_step(self, step: int) -> int:
        if not 1 <= int(step) <= self.G:
            raise ValueError(f"Step {step} out of range 1..{self.G}")
        return int(step)

    def gather(self, name: str, steps: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """Values of array ``name`` at 1-indexed ``steps`` (B,), broadcast against ``like``."""
        arr = torch.from_numpy(getattr(self, name)).to(device=like.device, dtype=like.dtype)
        out = arr[steps.long() - 1]
        return out.view(-1, *([1] * (like.ndim - 1)))

    def model_time(self, steps: torch.Tensor) -> torch.Tensor:
        return steps.to(torch.get_default_dtype()) * (TIME_SCALE / self.G)


@dataclass
class FlatTokens:
    """(c, M) tokens, M = t'*h'*w' in (t, h, w) row-major order."""

    values: torch.Tensor
    grid: tuple[int, int, int]

    def unflatten(self) -> torch.Tensor:
        return self.values.reshape(self.values.shape[0], *self.grid)


def flatten_tokens(tokens: TokenGrid | torch.Tensor) -> FlatTokens:
    values = tokens.values if isinstance(tokens, TokenGrid) else tokens
    c, t, h, w = values.shape
    return FlatTokens(values.reshape(c, t * h * w), (t, h, w))


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """
    (N, dim) table with row n: [sin(p/10000^(0/dim)), cos(p/10000^(0/dim)), sin(p/10000^(2/dim)), ...].
    """
    if dim % 2:
        raise ValueError(f"Embedding width must be even, got {dim}")
    k = torch.arange(0, dim, 2, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * k / dim)
    args = positions.to(torch.float64)[:, None] * freqs[None, :]
    table = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(positions.shape[0], dim)
    return table.to(torch.get_default_dtype())


def positional_embedding(C: int, M: int) -> torch.Tensor:
    """(C, M) matrix: emb[2k, i] = sin(i / 10000^(2k/C)), emb[2k+1, i] = cos(i / 10000^(2k/C))."""
    if M < 1:
        raise ValueError(f"Need at least one position, got {M}")
    return sinusoidal_embedding(torch.arange(M), C).T.contiguous()


@dataclass(frozen=True)
class DenoiserConfig:
    token_channels: int = 16
    token_grid: tuple[int, int, int] = (2, 4, 4)
    traj_len: int = 8
    width: int = 128
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    learn_sigma: bool = True
    traj_scale: float = 4.0
    dropout: float = 0.0
    use_timestep_embedding: bool = True
    use_trajectory_embedding: bool = True
    use_positional_embedding: bool = True

    def __post_init__(self):
        object.__setattr__(self, "token_grid", tuple(int(n) for n in self.token_grid))
        if self.width % 2:
            raise ConfigError(f"diffusion.width must be even, got {self.width}")
        if self.heads < 1 or self.width % self.heads:
            raise ConfigError(f"diffusion.heads={self.heads} must divide diffusion.width={self.width}")
        if len(self.token_grid) != 3 or min(self.token_grid) < 1:
            raise ConfigError(f"diffusion.token_grid must be three positive integers, got {self.token_grid}")
        if self.traj_len < 1 or self.depth < 0 or self.token_channels < 1:
            raise ConfigError("diffusion.traj_len, diffusion.token_channels must be >= 1 and diffusion.depth >= 0")
        if not self.traj_scale > 0:
            raise ConfigError(f"diffusion.traj_scale must be > 0, got {self.traj_scale}")

    @property
    def num_positions(self) -> int:
        return math.prod(self.token_grid)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class TimestepEmbedder(nn.Module):
    """nu: MLP over the sin/cos embedding of the (rescaled) step."""

    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t):
        return self.mlp(sinusoidal_embedding(t, self.width).to(self.mlp[0].weight.dtype))


class TrajectoryEmbedder(nn.Module):
    """delta: MLP over the flattened trajectory, re-origined at its first position."""

    def __init__(self, traj_len: int, width: int, scale: float):
        super().__init__()
        self.scale = scale
        self.mlp = nn.Sequential(nn.Linear(2 * traj_len, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, traj):
        rel = (traj - traj[:, :1]) / self.scale
        return self.mlp(rel.flatten(1))


class DiTBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float, dropout: float):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = nn.MultiheadAttention(width, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(width, hidden), nn.GELU(approximate="tanh"), nn.Dropout(dropout), nn.Linear(hidden, width)
        )
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x, c):
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(c).chunk(6, dim=1)
        y = modulate(self.norm1(x), shift_msa, scale_msa)
        x = x + gate_msa.unsqueeze(1) * self.attn(y, y, y, need_weights=False)[0]
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


class FinalLayer(nn.Module):
    def __init__(self, width: int, out_channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(width, out_channels)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))
        for layer in (self.linear, self.adaLN_modulation[-1]):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm(x), shift, scale))


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        out_channels = cfg.token_channels * (2 if cfg.learn_sigma else 1)
        self.input_proj = nn.Linear(cfg.token_channels, cfg.width)
        self.register_buffer("pos_table", positional_embedding(cfg.width, cfg.num_positions).T.contiguous())
        self.timestep = TimestepEmbedder(cfg.width)
        self.trajectory = TrajectoryEmbedder(cfg.traj_len, cfg.width, cfg.traj_scale)
        self.blocks = nn.ModuleList(
            DiTBlock(cfg.width, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.depth)
        )
        self.final = FinalLayer(cfg.width, out_channels)

    def condition(self, traj: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """g = nu(t) + delta(traj); a disabled embedding contributes zero."""
        if traj.shape[1] != self.cfg.traj_len:
            raise DataError(f"Trajectory has {traj.shape[1]} positions, denoiser expects {self.cfg.traj_len}")
        dtype = self.input_proj.weight.dtype
        g = torch.zeros(traj.shape[0], self.cfg.width, dtype=dtype, device=traj.device)
        if self.cfg.use_timestep_embedding:
            g = g + self.timestep(t)
        if self.cfg.use_trajectory_embedding:
            g = g + self.trajectory(traj.to(dtype))
        return g

    def forward(self, x: torch.Tensor, traj: torch.Tensor, t: torch.Tensor):
        """
        x: (B, c, M) noisy tokens, traj: (B, T, 2), t: (B,) model time.
        Returns (eps_hat (B, c, M), variance values (B, c, M) or None).
        """
        if x.shape[1:] != (self.cfg.token_channels, self.cfg.num_positions):
            raise DataError(
                f"Expected tokens of shape (B, {self.cfg.token_channels}, {self.cfg.num_positions}), "
                f"got {tuple(x.shape)}"
            )
        c = self.condition(traj, t)
        h = self.input_proj(x.transpose(1, 2))
        if self.cfg.use_positional_embedding:
            h = h + self.pos_table
        for i, block in enumerate(self.blocks):
            h = block(h, c)
            if not torch.isfinite(h).all():
                raise NumericalError(f"Non-finite activations after transformer block {i}")
        out = self.final(h, c).transpose(1, 2)
        if self.cfg.learn_sigma:
            eps, values = out.chunk(2, dim=1)
            return eps, values
        return out, None


def _traj_tensor(traj) -> torch.Tensor:
    if isinstance(traj, Trajectory):
        return torch.from_numpy(traj.positions.astype(np.float64)).unsqueeze(0)
    return traj


def condition_vector(traj: Trajectory, step: int, model: Denoiser, schedule: DiffusionSchedule) -> torch.Tensor:
    """The (width,) conditioning vector g for one trajectory at step g."""
    steps = torch.tensor([schedule.check_step(step)])
    return model.condition(_traj_tensor(traj).to(model.input_proj.weight.dtype), schedule.model_time(steps))[0]


def q_sample(x0: torch.Tensor, steps: torch.Tensor, noise: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    if noise.shape != x0.shape:
        raise DataError(f"Noise shape {tuple(noise.shape)} does not match tokens {tuple(x0.shape)}")
    return (
        schedule.gather("sqrt_alpha_bars", steps, x0) * x0
        + schedule.gather("sqrt_one_minus_alpha_bars", steps, x0) * noise
    )


def forward_noise(x0: FlatTokens, step: int, noise: torch.Tensor, schedule: DiffusionSchedule) -> FlatTokens:
    """x_g = sqrt(abar_g) x0 + sqrt(1 - abar_g) eps."""
    steps = torch.tensor([schedule.check_step(step)])
    x_g = q_sample(x0.values.unsqueeze(0), steps, noise.unsqueeze(0), schedule)[0]
    return FlatTokens(x_g, x0.grid)


def q_posterior(x0: torch.Tensor, x_g: torch.Tensor, steps: torch.Tensor, schedule: DiffusionSchedule):
    """Mean, variance and clipped log-variance of q(x_{g-1} | x_g, x0)."""
    mean = (
        schedule.gather("posterior_mean_coef_x0", steps, x_g) * x0
        + schedule.gather("posterior_mean_coef_xg", steps, x_g) * x_g
    )
    variance = schedule.gather("posterior_variance", steps, x_g).expand_as(x_g)
    log_variance = schedule.gather("posterior_log_variance_clipped", steps, x_g).expand_as(x_g)
    return mean, variance, log_variance


def learned_log_variance(values: torch.Tensor, steps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Interpolates between log beta~_g and log beta_g with frac = (v + 1) / 2."""
    min_log = schedule.gather("posterior_log_variance_clipped", steps, values)
    max_log = torch.log(schedule.gather("betas", steps, values))
    frac = (values + 1) / 2
    return frac * max_log + (1 - frac) * min_log


def model_outputs(model: Denoiser, x_g: torch.Tensor, traj: torch.Tensor, steps: torch.Tensor, schedule: DiffusionSchedule):
    """(eps_hat, log-variance or None) for a batch."""
    eps, values = model(x_g, traj, schedule.model_time(steps))
    logvar = learned_log_variance(values, steps, schedule) if values is not None else None
    return eps, logvar


def denoise_predict(x_g: FlatTokens, traj: Trajectory, step: int, model: Denoiser, schedule: DiffusionSchedule):
    """Predicted noise (and log-variance when learned) for one sample."""
    steps = torch.tensor([schedule.check_step(step)])
    traj_t = _traj_tensor(traj).to(x_g.values.dtype)
    eps, logvar = model_outputs(model, x_g.values.unsqueeze(0), traj_t, steps, schedule)
    return FlatTokens(eps[0], x_g.grid), (logvar[0] if logvar is not None else None)


def mean_from_eps(x_g: torch.Tensor, eps: torch.Tensor, steps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """mu = (x_g - beta_g / sqrt(1 - abar_g) * eps) / sqrt(alpha_g)."""
    beta = schedule.gather("betas", steps, x_g)
    return (x_g - beta / schedule.gather("sqrt_one_minus_alpha_bars", steps, x_g) * eps) / torch.sqrt(
        schedule.gather("alphas", steps, x_g)
    )


def normal_kl(mean1, logvar1, mean2, logvar2):
    """KL(N(mean1, exp(logvar1)) || N(mean2, exp(logvar2))), elementwise."""
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2) + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def gaussian_nll(x, mean, logvar):
    return 0.5 * (math.log(2 * math.pi) + logvar + (x - mean) ** 2 * torch.exp(-logvar))


def simple_loss_terms(eps_hat: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Per-sample 1/2 mean squared noise error."""
    return 0.5 * mean_flat((eps_hat - noise) ** 2)


def vlb_terms(
    x0: torch.Tensor,
    x_g: torch.Tensor,
    steps: torch.Tensor,
    eps_hat: torch.Tensor,
    logvar: torch.Tensor,
    schedule: DiffusionSchedule,
    detach_mean: bool = True,
) -> torch.Tensor:
    """Per-sample bound term in nats per element: KL for g > 1, decoder NLL of x0 at g = 1."""
    if detach_mean:
        eps_hat = eps_hat.detach()
    mean = mean_from_eps(x_g, eps_hat, steps, schedule)
    true_mean, _, true_logvar = q_posterior(x0, x_g, steps, schedule)
    kl = mean_flat(normal_kl(true_mean, true_logvar, mean, logvar))
    nll = mean_flat(gaussian_nll(x0, mean, logvar))
    return torch.where(steps == 1, nll, kl)


def loss_simple(x0: FlatTokens, traj: Trajectory, step: int, noise: torch.Tensor, model: Denoiser, schedule: DiffusionSchedule) -> torch.Tensor:
    x_g = forward_noise(x0, step, noise, schedule)
    eps_hat, _ = denoise_predict(x_g, traj, step, model, schedule)
    return simple_loss_terms(eps_hat.values.unsqueeze(0), noise.unsqueeze(0))[0]


def loss_vlb(
    x0: FlatTokens,
    traj: Trajectory,
    step: int,
    model: Denoiser,
    schedule: DiffusionSchedule,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    detach_mean: bool = True,
) -> torch.Tensor:
    if not model.cfg.learn_sigma:
        raise ConfigError("diffusion.learn_sigma is disabled; the variational bound needs a learned variance")
    if noise is None:
        noise = torch.randn(x0.values.shape, generator=generator, dtype=x0.values.dtype)
    x_g = forward_noise(x0, step, noise, schedule)
    eps_hat, logvar = denoise_predict(x_g, traj, step, model, schedule)
    steps = torch.tensor([step])
    return vlb_terms(
        x0.values.unsqueeze(0), x_g.values.unsqueeze(0), steps,
        eps_hat.values.unsqueeze(0), logvar.unsqueeze(0), schedule, detach_mean,
    )[0]


@dataclass
class DiffusionLossRecord:
    step: int
    stage: str
    l_simple: float
    l_vlb: float
    total: float

    def as_row(self) -> list:
        return [self.step, self.stage, self.l_simple, self.l_vlb, self.total]


def diffusion_losses(
    tokens: torch.Tensor,
    trajs: torch.Tensor,
    model: Denoiser,
    schedule: DiffusionSchedule,
    generator: torch.Generator | None = None,
):
    """(L_simple, L_vlb or None) averaged over a batch with uniformly drawn steps."""
    b = tokens.shape[0]
    steps = torch.randint(1, schedule.G + 1, (b,), generator=generator)
    noise = torch.randn(tokens.shape, generator=generator, dtype=tokens.dtype)
    x_g = q_sample(tokens, steps, noise, schedule)
    eps_hat, logvar = model_outputs(model, x_g, trajs.to(tokens.dtype), steps, schedule)
    l_simple = simple_loss_terms(eps_hat, noise).mean()
    l_vlb = vlb_terms(tokens, x_g, steps, eps_hat, logvar, schedule).mean() if logvar is not None else None
    return l_simple, l_vlb


def diffusion_train_step(
    tokens: torch.Tensor,
    trajs: torch.Tensor,
    model: Denoiser,
    optimizer: torch.optim.Optimizer,
    schedule: DiffusionSchedule,
    stage: str,
    lr: float,
    generator: torch.Generator | None = None,
    vlb_weight: float = 1e-3,
    step: int = 0,
) -> DiffusionLossRecord:
    """
    One optimizer step. ``stage="simple"`` trains on L_simple only;
    ``stage="full"`` on L_simple + vlb_weight * L_vlb.
    """
    if stage not in ("simple", "full"):
        raise ValueError(f"Unknown training stage {stage!r}")
    if stage == "full" and not model.cfg.learn_sigma:
        raise ConfigError("The full training stage needs diffusion.learn_sigma enabled")
    model.train()
    set_learning_rate(optimizer, lr)
    optimizer.zero_grad(set_to_none=True)
    l_simple, l_vlb = diffusion_losses(tokens, trajs, model, schedule, generator)
    total = l_simple + vlb_weight * l_vlb if stage == "full" else l_simple
    if not torch.isfinite(total):
        raise NumericalError(f"Non-finite diffusion loss at step {step}")
    total.backward()
    check_finite_gradients(model, step)
    optimizer.step()
    return DiffusionLossRecord(
        step=step,
        stage=stage,
        l_simple=l_simple.item(),
        l_vlb=l_vlb.item() if l_vlb is not None else 0.0,
        total=total.item(),
    )
