"""Reconstruction IoU/mIoU and a Frechet-distance proxy over tokenizer features."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy import linalg

from .errors import DataError, NumericalError
from .occupancy import OccupancySequence
from .tokenizer import OccupancyTokenizer, encode

logger = logging.getLogger(__name__)

EIG_TOLERANCE = 1e-9


def _check_pair(pred: OccupancySequence, gt: OccupancySequence) -> None:
    if pred.dims != gt.dims:
        raise DataError(f"Cannot compare clips of dims {pred.dims} and {gt.dims}")
    if pred.vocab.size != gt.vocab.size:
        raise DataError(f"Vocabulary sizes differ: {pred.vocab.size} vs {gt.vocab.size}")


def occupancy_iou(pred: OccupancySequence, gt: OccupancySequence) -> float:
    """IoU of the occupied (label != 0) voxel sets; 1.0 when both are empty."""
    _check_pair(pred, gt)
    a = pred.labels != 0
    b = gt.labels != 0
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def class_miou(pred: OccupancySequence, gt: OccupancySequence) -> tuple[dict[int, float], float]:
    """
    Per-class IoU for every non-empty class present in ``pred`` or ``gt``, and their mean.
    Classes absent from both are left out; with none present the mean is 1.0.
    """
    _check_pair(pred, gt)
    per_class = {}
    for k in range(1, gt.vocab.size):
        a = pred.labels == k
        b = gt.labels == k
        union = np.count_nonzero(a | b)
        if union:
            per_class[k] = np.count_nonzero(a & b) / union
    miou = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return per_class, miou


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise DataError(f"Covariance shape {cov.shape} does not match mean of size {mean.size}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-9):
            raise DataError("Covariance is not symmetric")
        if mean.size and linalg.eigvalsh(cov).min() < -EIG_TOLERANCE:
            raise DataError("Covariance has negative eigenvalues")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def from_features(cls, features: np.ndarray) -> "FeatureStats":
        acc = FeatureAccumulator(np.asarray(features).shape[1])
        for row in features:
            acc.update(row)
        return acc.stats()


class FeatureAccumulator:
    """One-pass (Welford) mean/covariance, rows folded in arrival order."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self._m2 = self._m2 + np.outer(delta, x - self.mean)

    def stats(self) -> FeatureStats:
        cov = self._m2 / (self.count - 1) if self.count > 1 else np.zeros_like(self._m2)
        return FeatureStats(self.mean.copy(), (cov + cov.T) / 2, self.count)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; tiny negative eigenvalues clamp to zero."""
    eigvals, eigvecs = linalg.eigh((matrix + matrix.T) / 2)
    if eigvals.min() < -EIG_TOLERANCE:
        raise NumericalError(f"Matrix square root failed: eigenvalue {eigvals.min():.3e} is negative")
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def fid_proxy(real: FeatureStats, gen: FeatureStats) -> float:
    """
    Frechet distance between two Gaussians:
    |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    tr (S1 S2)^(1/2) is computed as tr (S1^(1/2) S2 S1^(1/2))^(1/2), which is symmetric.
    """
    if real.dim != gen.dim:
        raise DataError(f"Feature dimensions differ: {real.dim} vs {gen.dim}")
    diff = real.mean - gen.mean
    root = _psd_sqrt(real.covariance)
    product = root @ gen.covariance @ root
    eigvals = linalg.eigvalsh((product + product.T) / 2)
    if eigvals.min() < -EIG_TOLERANCE:
        raise NumericalError(f"Matrix square root failed: eigenvalue {eigvals.min():.3e} is negative")
    tr_covmean = np.sqrt(np.clip(eigvals, 0.0, None)).sum()
    return float(diff @ diff + np.trace(real.covariance) + np.trace(gen.covariance) - 2 * tr_covmean)


@torch.no_grad()
def extract_features(clip: OccupancySequence, tokenizer: OccupancyTokenizer) -> np.ndarray:
    """Global average of the continuous latent over (t', h', w'): a c-vector."""
    was_training = tokenizer.training
    tokenizer.eval()
    try:
        latent = encode(clip, tokenizer)
    finally:
        tokenizer.train(was_training)
    return latent.mean(dim=(1, 2, 3)).double().numpy()


def centroid_flow(seq: OccupancySequence) -> np.ndarray:
    """
    Mean per-frame shift (dh, dw) of the centroid of above-ground occupancy.
    Content flows opposite to ego motion, so driving along +x gives dh < 0.
    """
    shifts = []
    previous = None
    for t in range(seq.num_frames):
        columns = (seq.labels[t, :, :, 1:] != 0).any(axis=-1)
        if not columns.any():
            previous = None
            continue
        centroid = np.argwhere(columns).mean(axis=0)
        if previous is not None:
            shifts.append(centroid - previous)
        previous = centroid
    return np.mean(shifts, axis=0) if shifts else np.zeros(2)
