"""Pretext losses: autoregressive (APC), masked (MPC) and frame-level contrastive (CL) prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .numerics import cosine_sim
from .quantizer import QuantizeResult, diversity_loss

logger = logging.getLogger(__name__)


@dataclass
class MaskPlan:
    mask: np.ndarray  # bool (T,)
    weights: np.ndarray  # float (T,): 1.0 masked, 0.0 unmasked

    def __len__(self):
        return len(self.mask)

    @classmethod
    def from_mask(cls, mask) -> "MaskPlan":
        mask = np.asarray(mask, dtype=bool)
        return cls(mask, mask.astype(np.float64))

    def downsample(self) -> "MaskPlan":
        """Project to the 2x-downsampled rate: an output frame is masked if either source frame is."""
        m = self.mask
        if len(m) % 2:
            m = np.append(m, False)
        return MaskPlan.from_mask(m[0::2] | m[1::2])


def mask_count(t: int, proportion: float) -> int:
    return int(np.floor(proportion * t + 0.5))


def make_mask_plan(t: int, proportion: float, rng) -> MaskPlan:
    """Mask exactly ``round(proportion * t)`` frames (ties up), uniformly without replacement.

    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    if t <= 0:
        raise ValueError("cannot mask an empty sequence")
    if not 0.0 < proportion < 1.0:
        raise ValueError(f"mask proportion must be in (0, 1), got {proportion}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    mask = np.zeros(t, dtype=bool)
    mask[rng.choice(t, size=mask_count(t, proportion), replace=False)] = True
    return MaskPlan.from_mask(mask)


def _frame_distance(diff: torch.Tensor, norm: str) -> torch.Tensor:
    if norm == "l1":
        return diff.abs().sum(-1)
    if norm == "l2":
        return (diff * diff).sum(-1)
    raise ValueError(f"unknown norm {norm!r}")


def apc_loss(targets: torch.Tensor, preds: torch.Tensor, shift: int, norm: str = "l1") -> torch.Tensor:
    """Predict the frame ``shift`` steps ahead: mean over batch of
    ``sum_i |x_{i+n} - y_i| / ((T' - n) * D)``."""
    if targets.shape != preds.shape:
        raise ValueError(f"shape mismatch {tuple(targets.shape)} vs {tuple(preds.shape)}")
    t, d = targets.shape[-2:]
    if not 1 <= shift < t:
        raise ValueError(f"APC shift {shift} must satisfy 1 <= n < T'={t}")
    dist = _frame_distance(targets[..., shift:, :] - preds[..., : t - shift, :], norm)
    return (dist.sum(-1) / ((t - shift) * d)).mean()


def mpc_loss(targets: torch.Tensor, recon: torch.Tensor, weights: torch.Tensor, norm: str = "l1") -> torch.Tensor:
    """``sum w_i |x_i - y_i| / (sum w_i * D)`` pooled over the batch; 0 when nothing is masked."""
    if targets.shape != recon.shape or weights.shape != targets.shape[:-1]:
        raise ValueError("targets, reconstructions and weights disagree in shape")
    total = weights.sum()
    weighted = (weights * _frame_distance(targets - recon, norm)).sum()
    if total.item() == 0:
        return weighted * 0.0
    return weighted / (total * targets.shape[-1])


def info_nce(pos_sim: torch.Tensor, all_sims: torch.Tensor, kappa: float) -> torch.Tensor:
    """Per-item ``-log softmax`` of the positive among all candidates, similarities scaled by 1/kappa."""
    return torch.logsumexp(all_sims / kappa, dim=-1) - pos_sim / kappa


def codebook_similarities(y: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every ``y`` row with every codebook entry, shape (..., V)."""
    if entries.shape[0] != 1:
        raise ValueError("contrastive candidates need a single codebook (G=1)")
    return cosine_sim(y[..., None, :], entries[0])


class _Flag:
    empty_support = 0


flags = _Flag()


def cl_frame_loss(
    outputs: torch.Tensor,
    quant: QuantizeResult,
    entries: torch.Tensor,
    weights: torch.Tensor,
    kappa: float = 0.1,
    beta: float = 0.1,
    diversity_sign: float = 1.0,
) -> torch.Tensor:
    """Masked-frame infoNCE against the whole codebook plus ``beta`` times the diversity term.

    ``quant`` holds the positives: codebook entries selected from the
    unmasked input at the same positions.
    """
    pos = cosine_sim(outputs, quant.quantized)
    nce = info_nce(pos, codebook_similarities(outputs, entries), kappa)
    div = beta * diversity_sign * diversity_loss(quant.usage)
    total = weights.sum()
    if total.item() == 0:
        flags.empty_support += 1
        logger.debug("contrastive loss without masked frames; diversity term only")
        return div + (nce * 0.0).sum()
    return (weights * nce).sum() / total + div
