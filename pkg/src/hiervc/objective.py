"""Rate-weighted training objective and rate/distortion accounting.

The loss minimized during training is ``beta * rate + distortion`` where

* ``rate`` is the sum over latent levels of the closed-form Gaussian KL
  between the posterior and its matching prior, evaluated under latent
  prefixes sampled from the posterior chain;
* ``distortion`` is the negative reconstruction log-likelihood under a
  diagonal Gaussian with fixed variance 1/(2*pi) per mel cell.  At that
  variance the per-element normalizing constant ``0.5 * log(2*pi*var)`` is
  exactly zero, so distortion reduces to ``pi * sum((x - mean)**2)`` and
  both rate and distortion are reported in nats per segment with no
  additive offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .dataset import DatasetManifest, load_segments
from .errors import InvalidInputError, NumericalError
from .model import DiagonalGaussian, SplitHierarchicalVAE, as_generator

LIKELIHOOD_VARIANCE = 1.0 / (2.0 * math.pi)


def _kl_elements(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """Element-wise KL(q || p) for diagonal Gaussians."""
    if q.mean.shape != p.mean.shape:
        raise InvalidInputError(
            f"KL shape mismatch: {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}"
        )
    var_ratio = torch.exp(q.log_variance - p.log_variance)
    mean_term = (q.mean - p.mean) ** 2 * torch.exp(-p.log_variance)
    return 0.5 * (p.log_variance - q.log_variance + var_ratio + mean_term - 1.0)


def kl_gaussian(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """Closed-form KL(q || p) summed over all elements; non-negative."""
    return _kl_elements(q, p).sum()


def gaussian_distortion(x: Tensor, mean: Tensor) -> Tensor:
    """Negative log-likelihood of ``x`` under N(mean, 1/(2*pi)) per element.

    Summed over non-batch dimensions, averaged over the batch.
    """
    squared = (x - mean) ** 2
    per_sample = squared.reshape(squared.shape[0], -1).sum(dim=1)
    return math.pi * per_sample.mean()


@dataclass
class ObjectiveBreakdown:
    """Per-level KL terms plus the reconstruction term for one estimate.

    Values are tensors so the loss stays differentiable; ``loss`` is
    recomputed from the parts, keeping it consistent with them exactly.
    """

    per_level_kl: Tensor
    distortion: Tensor
    beta: float
    split_level: int

    @property
    def rate(self) -> Tensor:
        return self.per_level_kl.sum()

    @property
    def rate_below_split(self) -> Tensor:
        return self.per_level_kl[: self.split_level].sum()

    @property
    def loss(self) -> Tensor:
        return self.beta * self.rate + self.distortion


def elbo_beta(
    model: SplitHierarchicalVAE,
    x,
    speaker,
    beta: float,
    rng=None,
    mean_only: bool = False,
    zero_residual: bool = False,
) -> ObjectiveBreakdown:
    """Single-sample reparameterized estimate of the training objective.

    Encodes level by level, accumulating KL(q(z_l | x, z_<l, y) || p(z_l |
    z_<l[, y])) under the sampled posterior prefix, then scores the decoder
    output at the sampled hierarchy.  Differentiable in all parameters.
    """
    if beta < 0:
        raise InvalidInputError(f"beta must be non-negative, got {beta}")
    gen = as_generator(rng)
    result, output = model.reconstruction_forward(
        x, speaker, rng=gen, mean_only=mean_only, zero_residual=zero_residual
    )
    levels = []
    for q, p in zip(result.posteriors, result.priors):
        elements = _kl_elements(q, p)
        levels.append(elements.reshape(elements.shape[0], -1).sum(dim=1).mean())
    per_level = torch.stack(levels)
    target = model._check_input(x)
    distortion = gaussian_distortion(target, output)
    breakdown = ObjectiveBreakdown(
        per_level_kl=per_level,
        distortion=distortion,
        beta=float(beta),
        split_level=model.config.split_level,
    )
    if not torch.isfinite(breakdown.loss):
        kls = ", ".join(f"z{i + 1}={v.item():.4g}" for i, v in enumerate(per_level))
        raise NumericalError(
            f"non-finite objective (distortion={distortion.item():.4g}; per-level KL: {kls})"
        )
    return breakdown


@dataclass(frozen=True)
class RDPoint:
    """A (rate, distortion) coordinate measured at a given beta.

    ``rate_below_split`` additionally reports the KL mass in the
    speaker-invariant levels only, so both accountings stay available.
    """

    rate: float
    distortion: float
    beta: float
    rate_below_split: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.rate) and math.isfinite(self.distortion)):
            raise NumericalError("rate/distortion must be finite")
        if self.beta < 0:
            raise InvalidInputError("beta must be non-negative")
        if self.rate < -1e-6:
            raise NumericalError(f"negative rate {self.rate}")
        object.__setattr__(self, "rate", max(self.rate, 0.0))


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, DatasetManifest):
        return load_segments(data)
    segments, speakers = data
    return np.asarray(segments), np.asarray(speakers)


def rd_evaluate(
    model: SplitHierarchicalVAE,
    data,
    beta: float,
    sample_count: int | None = None,
    seed: int = 0,
    batch_size: int = 32,
) -> RDPoint:
    """Average rate and distortion per segment over a dataset.

    ``data`` is a manifest or a ``(segments, speaker_ids)`` pair of arrays
    in normalized units.  ``sample_count`` evaluates a fixed-seed subsample;
    batches are visited in a fixed order so results are reproducible.
    """
    segments, speakers = _as_arrays(data)
    total = segments.shape[0]
    if total == 0:
        raise InvalidInputError("empty dataset")
    indices = np.arange(total)
    if sample_count is not None and sample_count < total:
        picker = np.random.default_rng(seed)
        indices = np.sort(picker.choice(total, size=sample_count, replace=False))
    gen = torch.Generator()
    gen.manual_seed(seed)

    rate_sum = 0.0
    invariant_sum = 0.0
    distortion_sum = 0.0
    count = 0
    with torch.no_grad():
        for lo in range(0, len(indices), batch_size):
            batch = indices[lo : lo + batch_size]
            breakdown = elbo_beta(
                model, segments[batch], speakers[batch], beta=beta, rng=gen
            )
            weight = len(batch)
            rate_sum += float(breakdown.rate) * weight
            invariant_sum += float(breakdown.rate_below_split) * weight
            distortion_sum += float(breakdown.distortion) * weight
            count += weight
    return RDPoint(
        rate=rate_sum / count,
        distortion=distortion_sum / count,
        beta=float(beta),
        rate_below_split=invariant_sum / count,
    )
