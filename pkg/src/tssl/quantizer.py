"""Gumbel-softmax vector quantizer and codebook diversity loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn
import torch.nn.functional as F


@dataclass
class QuantizeResult:
    selected: torch.Tensor  # (..., G) long
    soft_probs: torch.Tensor  # (..., G, V)
    onehot: torch.Tensor  # (..., G, V); straight-through when built in hard train mode
    quantized: torch.Tensor  # (..., G * D)
    usage: torch.Tensor  # (G, V) batch-averaged soft probabilities


def gumbel_noise(shape, generator: torch.Generator, dtype) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    u = u.clamp(1e-12, 1.0 - 1e-12)
    return (-torch.log(-torch.log(u))).to(dtype)


class Quantizer(nn.Module):
    """Codebook of ``groups x num_entries`` vectors selected through Gumbel-softmax.

    ``logits_proj`` scores every entry from the input; selection is hard in the
    forward pass and carries the soft distribution's gradient backward.
    """

    def __init__(self, in_dim: int, entry_dim: int, num_entries: int, groups: int = 1, tau: float = 2.0):
        super().__init__()
        self.groups = groups
        self.num_entries = num_entries
        self.entry_dim = entry_dim
        self.logits_proj = nn.Linear(in_dim, groups * num_entries)
        bound = 1.0 / math.sqrt(entry_dim)
        self.entries = nn.Parameter(torch.empty(groups, num_entries, entry_dim).uniform_(-bound, bound))
        self.tau = tau

    @property
    def out_dim(self) -> int:
        return self.groups * self.entry_dim

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.logits_proj(x).unflatten(-1, (self.groups, self.num_entries))

    def forward(
        self,
        x: torch.Tensor,
        train_mode: bool = True,
        generator: Optional[torch.Generator] = None,
        straight_through: bool = True,
    ) -> QuantizeResult:
        if self.tau <= 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")
        if x.shape[-1] != self.logits_proj.in_features:
            raise ValueError(f"input dim {x.shape[-1]} != {self.logits_proj.in_features}")
        logits = self.logits(x)
        if train_mode:
            if generator is None:
                raise ValueError("train-mode quantization needs a seeded generator")
            logits = logits + gumbel_noise(logits.shape, generator, logits.dtype)
        soft = torch.softmax(logits / self.tau, dim=-1)
        selected = soft.argmax(-1)
        hard = F.one_hot(selected, self.num_entries).to(soft.dtype)
        if straight_through:
            onehot = hard + (soft - soft.detach())
        else:
            onehot = soft
        quantized = torch.einsum("...gv,gvd->...gd", onehot, self.entries).flatten(-2)
        usage = soft.reshape(-1, self.groups, self.num_entries).mean(0)
        return QuantizeResult(selected, soft, onehot, quantized, usage)


def diversity_loss(usage: torch.Tensor) -> torch.Tensor:
    """``(1 / GV) * sum_{g,v} p log p`` over codebook usage ``(G, V)``.

    This is scaled negative entropy: 0 at one-hot usage and ``-log(V) / V``
    at uniform usage, so minimizing it spreads selections across entries.
    """
    if usage.ndim == 1:
        usage = usage[None]
    if bool((usage < 0).any()):
        raise ValueError("usage probabilities must be non-negative")
    if not torch.allclose(usage.sum(-1), torch.ones((), dtype=usage.dtype), atol=1e-6):
        raise ValueError("usage rows must sum to 1")
    g, v = usage.shape
    return torch.special.xlogy(usage, usage).sum() / (g * v)


def temperature_at(step: int, start: float = 2.0, end: float = 0.5, decay: float = 0.9995) -> float:
    return max(end, start * decay**step)
