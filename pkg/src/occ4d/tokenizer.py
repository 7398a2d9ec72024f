"""
4D occupancy scene tokenizer.

Labels are embedded per class, the height axis is folded into channels, and a
stack of stride-2 3D convolutions compresses (T, H, W) by 2^L. Cross-channel
attention mixes channel groups at every site before a 1x1x1 projection to the
token width c. Tokens are snapped to the nearest codebook entry and the decoder
mirrors the encoder back to per-voxel class logits.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .errors import ConfigError, DataError, NumericalError
from .nn_utils import check_finite_gradients, labels_to_tensor, set_learning_rate
from .occupancy import OccupancySequence, vocabulary_for

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TokenizerConfig:
    num_classes: int = 8
    depth: int = 4
    class_embed_dim: int = 2
    levels: int = 2
    latent_channels: int = 16
    codebook_size: int = 64
    attn_groups: int = 8
    commitment_beta: float = 0.25
    dropout: float = 0.1
    dead_code_steps: int = 200
    class_weighting: bool = False

    def __post_init__(self):
        for name in ("num_classes", "depth", "class_embed_dim", "latent_channels", "attn_groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"tokenizer.{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError(f"tokenizer.num_classes must be >= 2, got {self.num_classes}")
        if self.levels < 0:
            raise ConfigError(f"tokenizer.levels must be >= 0, got {self.levels}")
        if self.codebook_size < 2:
            raise ConfigError(f"tokenizer.codebook_size must be >= 2, got {self.codebook_size}")
        if self.deep_channels % self.attn_groups:
            raise ConfigError(
                f"tokenizer.attn_groups={self.attn_groups} does not divide the "
                f"{self.deep_channels} deepest channels"
            )
        if self.commitment_beta < 0 or not 0 <= self.dropout < 1:
            raise ConfigError("tokenizer.commitment_beta must be >= 0 and tokenizer.dropout in [0, 1)")

    @property
    def base_channels(self) -> int:
        """Channels after folding height into the class embedding: D * c'."""
        return self.depth * self.class_embed_dim

    @property
    def deep_channels(self) -> int:
        return self.base_channels * 2**self.levels

    def token_shape(self, dims: Sequence[int]) -> tuple[int, int, int, int]:
        """(c, t', h', w') for an input of (T, H, W)."""
        factor = 2**self.levels
        out = []
        for axis, n in zip("THW", dims[:3]):
            if n < 1 or n % factor:
                raise ConfigError(f"dims.{axis}={n} is not divisible by 2^levels={factor}")
            out.append(n // factor)
        return (self.latent_channels, *out)


@dataclass
class TokenGrid:
    """A (c, t', h', w') token field, optionally with the codebook indices it was snapped to."""

    values: torch.Tensor
    code_indices: torch.Tensor | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


@dataclass
class TokenizerOutput:
    logits: torch.Tensor     # (B, K, T, H, W, D)
    latent: torch.Tensor     # (B, c, t, h, w), before quantization
    selected: torch.Tensor   # (B, c, t, h, w), codes[indices], carries codebook gradient
    indices: torch.Tensor    # (B, t, h, w)


class CategoryEmbedding(nn.Module):
    """Learnable c'-vector per class; height and embedding axes folded into channels."""

    def __init__(self, num_classes: int, embed_dim: int):
        super().__init__()
        self.table = nn.Embedding(num_classes, embed_dim)

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        # labels: (B, T, H, W, D)
        return rearrange(self.table(labels), "b t h w d c -> b (d c) t h w")


class ResidualBlock3d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv3d(channels, channels, 1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class CrossChannelAttention(nn.Module):
    """
    Splits channels into groups and runs attention across the groups at every
    (t, h, w) site independently, followed by a feed-forward layer.
    """

    def __init__(self, channels: int, groups: int, dropout: float = 0.0):
        super().__init__()
        self.groups = groups
        dim = channels // groups
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads=1, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.SiLU(), nn.Linear(4 * dim, dim))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        b, _, t, h, w = x.shape
        seq = rearrange(x, "b (g k) t h w -> (b t h w) g k", g=self.groups)
        y = self.norm1(seq)
        seq = seq + self.dropout(self.attn(y, y, y, need_weights=False)[0])
        seq = seq + self.dropout(self.ff(self.norm2(seq)))
        return rearrange(seq, "(b t h w) g k -> b (g k) t h w", b=b, t=t, h=h, w=w)


class DownStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, out_channels, 3, stride=2, padding=1)
        self.res = ResidualBlock3d(out_channels)

    def forward(self, x):
        return self.res(F.silu(self.conv(x)))


class UpStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.deconv = nn.ConvTranspose3d(in_channels, out_channels, 4, stride=2, padding=1)
        self.res = ResidualBlock3d(out_channels)

    def forward(self, x):
        return self.res(F.silu(self.deconv(x)))


class Encoder(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        channels = cfg.base_channels
        stages = []
        for _ in range(cfg.levels):
            stages.append(DownStage(channels, 2 * channels))
            channels *= 2
        self.stages = nn.ModuleList(stages)
        self.attention = CrossChannelAttention(channels, cfg.attn_groups, cfg.dropout)
        self.proj = nn.Conv3d(channels, cfg.latent_channels, 1)

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        return self.proj(self.attention(x))


class Decoder(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        channels = cfg.deep_channels
        self.depth = cfg.depth
        self.proj = nn.Conv3d(cfg.latent_channels, channels, 1)
        self.attention = CrossChannelAttention(channels, cfg.attn_groups, cfg.dropout)
        stages = []
        for _ in range(cfg.levels):
            stages.append(UpStage(channels, channels // 2))
            channels //= 2
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv3d(channels, cfg.depth * cfg.num_classes, 1)

    def forward(self, z):
        x = self.attention(self.proj(z))
        for stage in self.stages:
            x = stage(x)
        return rearrange(self.head(x), "b (d k) t h w -> b k t h w d", d=self.depth)


def nearest_codes(vectors: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """
    Index of the nearest code (squared L2) for every row of ``vectors``.
    Ties resolve to the lowest index.
    """
    distances = ((vectors[:, None, :] - codes[None, :, :]) ** 2).sum(dim=-1)
    return distances.argmin(dim=1)


class Codebook(nn.Module):
    def __init__(self, size: int, dim: int, dead_code_steps: int = 0):
        super().__init__()
        self.codes = nn.Parameter(torch.empty(size, dim).uniform_(-1.0 / size, 1.0 / size))
        self.dead_code_steps = dead_code_steps
        self.register_buffer("usage_counts", torch.zeros(size, dtype=torch.long))
        self.register_buffer("idle_steps", torch.zeros(size, dtype=torch.long))

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    def lookup(self, latent: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Snaps a (B, c, t, h, w) latent; returns (codes[indices], indices)."""
        if not torch.isfinite(latent).all():
            raise NumericalError("Non-finite values in the latent passed to the codebook")
        b, c, t, h, w = latent.shape
        if c != self.codes.shape[1]:
            raise DataError(f"Latent has {c} channels, codes have dimension {self.codes.shape[1]}")
        flat = rearrange(latent, "b c t h w -> (b t h w) c")
        indices = nearest_codes(flat.detach(), self.codes.detach())
        selected = rearrange(self.codes[indices], "(b t h w) c -> b c t h w", b=b, t=t, h=h, w=w)
        return selected, indices.view(b, t, h, w)

    @torch.no_grad()
    def update_usage(self, indices: torch.Tensor, latent: torch.Tensor, generator: torch.Generator | None = None) -> int:
        """Accumulates usage and resets codes idle for ``dead_code_steps`` steps. Returns the reset count."""
        counts = torch.bincount(indices.flatten(), minlength=self.size)
        self.usage_counts += counts
        self.idle_steps = torch.where(counts > 0, torch.zeros_like(self.idle_steps), self.idle_steps + 1)
        if self.dead_code_steps <= 0:
            return 0
        dead = (self.idle_steps >= self.dead_code_steps).nonzero().flatten()
        if dead.numel() == 0:
            return 0
        pool = rearrange(latent, "b c t h w -> (b t h w) c")
        picks = torch.randint(0, pool.shape[0], (dead.numel(),), generator=generator)
        self.codes[dead] = pool[picks].to(self.codes.dtype)
        self.idle_steps[dead] = 0
        logger.warning(f"Reinitialised {dead.numel()} idle codes")
        return int(dead.numel())


class OccupancyTokenizer(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = CategoryEmbedding(cfg.num_classes, cfg.class_embed_dim)
        self.encoder = Encoder(cfg)
        self.codebook = Codebook(cfg.codebook_size, cfg.latent_channels, cfg.dead_code_steps)
        self.decoder = Decoder(cfg)

    def check_labels(self, labels: torch.Tensor) -> None:
        if labels.ndim != 5:
            raise DataError(f"Expected (B, T, H, W, D) labels, got shape {tuple(labels.shape)}")
        if labels.shape[-1] != self.cfg.depth:
            raise DataError(f"Clip depth D={labels.shape[-1]} does not match tokenizer.depth={self.cfg.depth}")
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.cfg.num_classes):
            raise DataError(f"Label {int(labels.max())} out of range for {self.cfg.num_classes} classes")
        self.cfg.token_shape(labels.shape[1:4])

    def encode(self, labels: torch.Tensor) -> torch.Tensor:
        self.check_labels(labels)
        return self.encoder(self.embedding(labels))

    def decode(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.ndim != 5 or tokens.shape[1] != self.cfg.latent_channels:
            raise DataError(
                f"Expected (B, {self.cfg.latent_channels}, t, h, w) tokens, got shape {tuple(tokens.shape)}"
            )
        return self.decoder(tokens)

    def forward(self, labels: torch.Tensor) -> TokenizerOutput:
        latent = self.encode(labels)
        selected, indices = self.codebook.lookup(latent)
        # straight-through: values are exactly the codes, gradient flows to the latent
        quantized = selected.detach() + (latent - latent.detach())
        return TokenizerOutput(self.decode(quantized), latent, selected, indices)


def embed_categories(seq: OccupancySequence, model: OccupancyTokenizer) -> torch.Tensor:
    """(D*c', T, H, W) embedded clip."""
    labels = labels_to_tensor([seq])
    model.check_labels(labels)
    return model.embedding(labels)[0]


def encode(seq: OccupancySequence, model: OccupancyTokenizer) -> torch.Tensor:
    """Continuous (c, t', h', w') latent of one clip."""
    return model.encode(labels_to_tensor([seq]))[0]


def quantize(latent: torch.Tensor, codebook: Codebook) -> TokenGrid:
    """Nearest-code snap of a (c, t', h', w') latent."""
    selected, indices = codebook.lookup(latent.unsqueeze(0))
    return TokenGrid(selected[0].detach(), indices[0])


def decode(tokens: TokenGrid, model: OccupancyTokenizer) -> torch.Tensor:
    """Per-voxel logits (num_classes, T, H, W, D)."""
    return model.decode(tokens.values.unsqueeze(0))[0]


def logits_to_sequence(logits: torch.Tensor, num_classes: int | None = None) -> OccupancySequence:
    """Argmax over the class axis of (K, T, H, W, D) logits; ties go to the lowest class."""
    labels = logits.argmax(dim=0).cpu().numpy()
    return OccupancySequence(labels, vocabulary_for(num_classes or logits.shape[0]))


@torch.no_grad()
def reconstruct(seq: OccupancySequence, model: OccupancyTokenizer) -> OccupancySequence:
    was_training = model.training
    model.eval()
    try:
        logits = model(labels_to_tensor([seq])).logits[0]
    finally:
        model.train(was_training)
    recon = logits_to_sequence(logits, model.cfg.num_classes)
    return OccupancySequence(recon.labels, seq.vocab)


def reconstruction_loss(logits: torch.Tensor, labels: torch.Tensor, class_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean per-voxel cross-entropy."""
    return F.cross_entropy(logits, labels, weight=class_weights)


def codebook_losses(latent: torch.Tensor, selected: torch.Tensor, beta: float) -> tuple[torch.Tensor, torch.Tensor]:
    """(codebook, commit): codes are pulled toward the latent, the latent toward the codes."""
    codebook = F.mse_loss(selected, latent.detach())
    commit = beta * F.mse_loss(latent, selected.detach())
    return codebook, commit


def inverse_frequency_weights(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    counts = torch.bincount(labels.flatten(), minlength=num_classes).to(torch.get_default_dtype())
    return labels.numel() / (num_classes * counts.clamp(min=1.0))


def _as_labels(batch) -> torch.Tensor:
    if isinstance(batch, OccupancySequence):
        return labels_to_tensor([batch])
    if isinstance(batch, torch.Tensor):
        return batch
    return labels_to_tensor(list(batch))


def tokenizer_loss(batch, model: OccupancyTokenizer) -> tuple[torch.Tensor, dict[str, torch.Tensor], TokenizerOutput]:
    """
    Total VQ objective on a clip or batch of clips.

    Returns (total, {"recon", "codebook", "commit"}, model outputs).
    """
    labels = _as_labels(batch)
    out = model(labels)
    weights = None
    if model.cfg.class_weighting:
        weights = inverse_frequency_weights(labels, model.cfg.num_classes).to(out.logits.dtype)
    recon = reconstruction_loss(out.logits, labels, weights)
    codebook, commit = codebook_losses(out.latent, out.selected, model.cfg.commitment_beta)
    total = recon + codebook + commit
    if not torch.isfinite(total):
        raise NumericalError(
            f"Non-finite tokenizer loss (recon={recon.item()}, codebook={codebook.item()}, commit={commit.item()})"
        )
    return total, {"recon": recon, "codebook": codebook, "commit": commit}, out


@dataclass
class TokenizerLossRecord:
    step: int
    recon: float
    codebook: float
    commit: float
    total: float

    def as_row(self) -> list:
        return [self.step, self.recon, self.codebook, self.commit, self.total]


def tokenizer_train_step(
    batch,
    model: OccupancyTokenizer,
    optimizer: torch.optim.Optimizer,
    lr: float,
    step: int = 0,
    generator: torch.Generator | None = None,
) -> TokenizerLossRecord:
    """One AdamW step on the total loss; updates codebook usage afterwards."""
    model.train()
    set_learning_rate(optimizer, lr)
    optimizer.zero_grad(set_to_none=True)
    try:
        total, parts, out = tokenizer_loss(batch, model)
    except NumericalError as e:
        raise NumericalError(f"Step {step}: {e}") from e
    total.backward()
    check_finite_gradients(model, step)
    optimizer.step()
    model.codebook.update_usage(out.indices, out.latent.detach(), generator)
    return TokenizerLossRecord(
        step=step,
        recon=parts["recon"].item(),
        codebook=parts["codebook"].item(),
        commit=parts["commit"].item(),
        total=total.item(),
    )


def voxel_accuracy(pred: OccupancySequence, gt: OccupancySequence) -> float:
    return float((pred.labels == gt.labels).mean())


def compression_ratio(input_dims: Sequence[int], token_dims: Sequence[int]) -> Fraction:
    """Ratio of spatio-temporal cell counts, channels excluded: (T*H*W) / (t'*h'*w')."""
    if len(input_dims) != len(token_dims):
        raise ValueError(f"Dimension rank mismatch: {tuple(input_dims)} vs {tuple(token_dims)}")
    if any(n <= 0 for n in (*input_dims, *token_dims)):
        raise ValueError(f"Dimensions must be positive: {tuple(input_dims)} / {tuple(token_dims)}")
    return Fraction(math.prod(input_dims), math.prod(token_dims))
