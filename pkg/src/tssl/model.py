"""Light-weight transformer encoder: VGG-style conv frontend, pre-LN blocks, pretraining and KS heads."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import torch
from torch import nn
import torch.nn.functional as F

from .quantizer import Quantizer

RECEPTIVE_FIELD = 7
# (time, freq) strides of the three 3x3 frontend convs; time RF = 1 + 2 + 2 + 2 = 7
CONV_STRIDES = ((1, 1), (1, 2), (2, 2))


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    n_blocks: int = 3
    input_dim: int = 64
    downsample: int = 2
    conv_channels: Tuple[int, int, int] = (8, 16, 16)
    classifier_classes: int = 0
    codebook_size: int = 0
    codebook_groups: int = 1
    param_budget: int = 330_000

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.downsample != 2:
            raise ModelError("only 2x temporal downsampling is supported")
        if len(self.conv_channels) != 3:
            raise ModelError("frontend has exactly three conv layers")

    @property
    def decoder_dim(self) -> int:
        return self.input_dim

    @property
    def frontend_freq_bins(self) -> int:
        f = self.input_dim
        for _, sf in CONV_STRIDES:
            f = (f - 1) // sf + 1
        return f

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class AttentionMask:
    mode: str
    length: int
    matrix: torch.Tensor = field(repr=False)  # (T', T') bool, True = blocked

    @classmethod
    def build(cls, mode: str, length: int) -> "AttentionMask":
        if mode == "causal":
            m = torch.triu(torch.ones(length, length, dtype=torch.bool), diagonal=1)
        elif mode == "none":
            m = torch.zeros(length, length, dtype=torch.bool)
        else:
            raise ModelError(f"unknown attention mode {mode!r}")
        return cls(mode, length, m)


def downsampled_length(t: int) -> int:
    return (t + 1) // 2


def sinusoidal_positions(length: int, dim: int, dtype=None) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    rate = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * rate)
    pe[:, 1::2] = torch.cos(pos * rate[: dim // 2])
    return pe.to(dtype or torch.get_default_dtype())


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, blocked: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.n_heads)
        scores = scores.masked_fill(blocked, float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.out(ctx.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, cfg.d_model)
        )

    def forward(self, x, blocked):
        x = x + self.attn(self.norm1(x), blocked)
        return x + self.ffn(self.norm2(x))


class EncoderModel(nn.Module):
    """Conv frontend + transformer blocks with APC/MPC decoder, optional CL codebook and classifier.

    Inputs are raw LFBE batches ``(B, T, 64)``; global per-band statistics in
    the ``norm_mean``/``norm_std`` buffers are applied first.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.conv_channels
        self.register_buffer("norm_mean", torch.zeros(cfg.input_dim))
        self.register_buffer("norm_std", torch.ones(cfg.input_dim))
        self.mask_embedding = nn.Parameter(torch.randn(cfg.input_dim) * 0.1)
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, 3, stride=s, padding=1)
            for cin, cout, s in zip((1, c1, c2), (c1, c2, c3), CONV_STRIDES)
        )
        self.frontend_proj = nn.Linear(c3 * cfg.frontend_freq_bins, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_blocks))
        self.out_norm = nn.LayerNorm(cfg.d_model)
        self.decoder = nn.Linear(cfg.d_model, cfg.decoder_dim)
        self.quant = (
            Quantizer(cfg.d_model, cfg.decoder_dim, cfg.codebook_size, cfg.codebook_groups)
            if cfg.codebook_size
            else None
        )
        self.classifier = (
            nn.Linear(cfg.d_model, cfg.classifier_classes) if cfg.classifier_classes else None
        )

    # -- input side --------------------------------------------------------

    def normalize(self, feats: torch.Tensor) -> torch.Tensor:
        return (feats - self.norm_mean) / self.norm_std

    def apply_mask_embedding(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Replace frames where ``mask`` is True by the learnable embedding."""
        if mask.shape != x.shape[:-1]:
            raise ModelError(f"mask shape {tuple(mask.shape)} does not match frames {tuple(x.shape[:-1])}")
        return torch.where(mask[..., None], self.mask_embedding.to(x.dtype), x)

    def frontend(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, F) normalized frames -> (B, ceil(T/2), d_model), positions added."""
        if x.shape[1] < RECEPTIVE_FIELD:
            raise ModelError("sequence shorter than receptive field")
        h = x[:, None]
        for conv in self.convs:
            h = F.gelu(conv(h))
        h = h.permute(0, 2, 1, 3).flatten(2)
        h = self.frontend_proj(h)
        return h + sinusoidal_positions(h.shape[1], self.cfg.d_model, h.dtype)

    # -- encoder -----------------------------------------------------------

    def encode(self, hidden: torch.Tensor, mask: AttentionMask) -> List[torch.Tensor]:
        if mask.length != hidden.shape[1]:
            raise ModelError(f"attention mask length {mask.length} != sequence length {hidden.shape[1]}")
        outs = []
        for block in self.blocks:
            hidden = block(hidden, mask.matrix)
            outs.append(hidden)
        return outs

    def run(self, x: torch.Tensor, attention: str = "none") -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """Normalized (optionally masked) frames -> (frontend output, per-block outputs)."""
        h = self.frontend(x)
        return h, self.encode(h, AttentionMask.build(attention, h.shape[1]))

    def representation(self, blocks: List[torch.Tensor], frontend_out: torch.Tensor) -> torch.Tensor:
        return self.out_norm(blocks[-1] if blocks else frontend_out)

    def classify(self, rep: torch.Tensor) -> torch.Tensor:
        if self.classifier is None:
            raise ModelError("model has no classifier head")
        return self.classifier(rep.mean(1))

    def logits(self, feats: torch.Tensor, attention: str = "none") -> torch.Tensor:
        h, blocks = self.run(self.normalize(feats), attention)
        return self.classify(self.representation(blocks, h))

    def encoder_parameters(self):
        """Everything except the classifier head."""
        return [p for n, p in self.named_parameters() if not n.startswith("classifier.")]


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for _, p in model.named_parameters())


def check_budget(model: EncoderModel) -> int:
    n = count_params(model)
    if n > model.cfg.param_budget:
        raise ModelError(f"{n} parameters exceed budget {model.cfg.param_budget}")
    return n


def frontend_targets(feats: torch.Tensor) -> torch.Tensor:
    """2x average-pool frames in time so targets align with frontend outputs.

    An odd trailing frame is averaged with itself.
    """
    if feats.shape[1] % 2:
        feats = torch.cat([feats, feats[:, -1:]], dim=1)
    return 0.5 * (feats[:, 0::2] + feats[:, 1::2])
