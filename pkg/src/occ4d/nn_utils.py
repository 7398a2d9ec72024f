"""Small torch helpers shared by the tokenizer and diffusion trainers."""
from __future__ import annotations

import logging
import random
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import NumericalError
from .occupancy import OccupancySequence

logger = logging.getLogger(__name__)


def seed_everything(seed: int) -> torch.Generator:
    """Seeds python, numpy and torch; returns a dedicated torch generator for data sampling."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def make_optimizer(params: Iterable[nn.Parameter], lr: float, weight_decay: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def set_learning_rate(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def check_finite_gradients(module: nn.Module, step: int | None = None) -> None:
    where = f" at step {step}" if step is not None else ""
    for name, param in module.named_parameters():
        if param.grad is not None and not torch.isfinite(param.grad).all():
            raise NumericalError(f"Non-finite gradient in parameter {name}{where}")


def labels_to_tensor(seqs: Sequence[OccupancySequence]) -> torch.Tensor:
    """Stacks clips into a (B, T, H, W, D) int64 tensor."""
    return torch.from_numpy(np.stack([s.labels for s in seqs]).astype(np.int64))


def mean_flat(x: torch.Tensor) -> torch.Tensor:
    """Mean over all non-batch dimensions."""
    return x.mean(dim=list(range(1, x.ndim)))
