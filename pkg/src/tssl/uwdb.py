"""Utterance-wise distinction boosting.

A frozen copy of a pretrained encoder embeds the clean utterance; a small
codebook turns that embedding into an anchor entry. The trainable encoder's
own pooled embedding is pulled toward the anchor by an utterance-level
infoNCE, mixed with the pretext loss as ``alpha * L_s3rl + (1 - alpha) * L_utt``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import List, Optional

import torch
from torch import nn

from .model import EncoderModel
from .numerics import cosine_sim
from .objectives import codebook_similarities, info_nce
from .quantizer import QuantizeResult, Quantizer, diversity_loss


@dataclass(frozen=True)
class UwdbConfig:
    alpha: float = 0.9
    beta: float = 0.1
    kappa: float = 0.1
    codebook_size: int = 32
    tap_layer: int = 2
    diversity_sign: float = 1.0
    standardize_anchor_input: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.tap_layer < 1:
            raise ValueError("tap_layer counts transformer blocks from 1")


@dataclass
class AnchorPair:
    index: torch.Tensor  # (B,) selected entry
    positive: torch.Tensor  # (B, D)
    negatives: torch.Tensor  # (B, V-1, D)


def pool_tap(blocks: List[torch.Tensor], tap_layer: int) -> torch.Tensor:
    """Mean over time of the ``tap_layer``-th block output (1-based)."""
    if not 1 <= tap_layer <= len(blocks):
        raise ValueError(f"tap_layer {tap_layer} outside 1..{len(blocks)}")
    return blocks[tap_layer - 1].mean(1)


def utterance_embed(model: EncoderModel, feats: torch.Tensor, tap_layer: int = 2,
                    attention: str = "none", mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Pooled tap-layer embedding; ``mask`` applies the pretext preprocessing (None = clean input)."""
    x = model.normalize(feats)
    if mask is not None:
        x = model.apply_mask_embedding(x, mask)
    _, blocks = model.run(x, attention)
    return pool_tap(blocks, tap_layer)


def anchor(u2: torch.Tensor, codebook: Quantizer, train_mode: bool = True,
           generator: Optional[torch.Generator] = None, straight_through: bool = True) -> tuple:
    """Quantize frozen-tower embeddings into anchor entries; returns (QuantizeResult, AnchorPair)."""
    q = codebook(u2, train_mode=train_mode, generator=generator, straight_through=straight_through)
    idx = q.selected[..., 0]
    entries = codebook.entries[0]
    keep = torch.ones(idx.shape + (codebook.num_entries,), dtype=torch.bool)
    keep.scatter_(-1, idx[..., None], False)
    negatives = entries.expand(idx.shape + entries.shape)[keep].view(idx.shape + (-1, entries.shape[-1]))
    return q, AnchorPair(idx, entries[idx], negatives)


def utt_loss(u1: torch.Tensor, q: QuantizeResult, codebook: Quantizer, kappa: float = 0.1,
             beta: float = 0.1, diversity_sign: float = 1.0) -> torch.Tensor:
    """Batch mean of the utterance infoNCE over all codebook entries, plus ``beta`` times diversity."""
    pos = cosine_sim(u1, q.quantized)
    nce = info_nce(pos, codebook_similarities(u1, codebook.entries), kappa)
    return nce.mean() + beta * diversity_sign * diversity_loss(q.usage)


def combined_loss(l_s3rl: torch.Tensor, l_utt: torch.Tensor, alpha: float) -> torch.Tensor:
    return alpha * l_s3rl + (1.0 - alpha) * l_utt


class Booster(nn.Module):
    """Frozen reference tower plus the trainable utterance codebook.

    Pooled embeddings of one tower share a large common component, so the
    codebook scores ``(u2 - mean) / std`` with statistics fixed once over the
    pretraining corpus (see ``calibrate``). Without calibration the
    statistics are 0 and 1 and the input passes through unchanged.
    """

    def __init__(self, pretrained: EncoderModel, cfg: UwdbConfig):
        super().__init__()
        self.cfg = cfg
        self.frozen = copy.deepcopy(pretrained)
        for p in self.frozen.parameters():
            p.requires_grad_(False)
        d = pretrained.cfg.d_model
        self.codebook = Quantizer(d, d, cfg.codebook_size)
        self.register_buffer("anchor_mean", torch.zeros(d))
        self.register_buffer("anchor_std", torch.ones(d))

    def frozen_embedding(self, feats: torch.Tensor, attention: str) -> torch.Tensor:
        """u2 on unprocessed input. Computed without a graph: nothing flows back into the frozen tower."""
        with torch.no_grad():
            return utterance_embed(self.frozen, feats, self.cfg.tap_layer, attention)

    def anchor_input(self, u2: torch.Tensor) -> torch.Tensor:
        return (u2 - self.anchor_mean) / self.anchor_std

    def calibrate(self, feats: torch.Tensor, attention: str, batch_size: int = 256) -> None:
        """Fix the anchor-input statistics from the frozen tower over ``feats``."""
        if not self.cfg.standardize_anchor_input:
            return
        u2 = torch.cat([self.frozen_embedding(feats[i : i + batch_size], attention)
                        for i in range(0, len(feats), batch_size)])
        self.anchor_mean.copy_(u2.mean(0))
        self.anchor_std.copy_(u2.std(0).clamp_min(1e-6))
