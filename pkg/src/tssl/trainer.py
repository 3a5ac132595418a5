"""Pretraining and fine-tuning loops.

Every stochastic choice (init, batch order, mask plans, Gumbel noise) is drawn
from a stream keyed on ``(seed, step, purpose)``, so repeated runs with the
same config reproduce the same logs and checkpoints.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .model import EncoderModel, ModelConfig, check_budget, frontend_targets
from .numerics import NumericalError, resolve_dtype
from .objectives import apc_loss, cl_frame_loss, make_mask_plan, mpc_loss
from .quantizer import temperature_at
from .uwdb import Booster, UwdbConfig, anchor, combined_loss, pool_tap, utt_loss

logger = logging.getLogger(__name__)

BASE_METHODS = ("apc", "mpc", "cl")
METHODS = BASE_METHODS + tuple(m + "+" for m in BASE_METHODS) + ("scratch",)
FREEZE_MODES = ("none", "encoder_frozen")

# stream ids for derive_seed
_BATCH, _MASK, _GUMBEL, _UTT_GUMBEL, _FT_BATCH = range(5)


@dataclass(frozen=True)
class TrainConfig:
    method: str = "apc"
    epochs_pretrain: int = 20
    epochs_uwdb: int = 20
    epochs_finetune: int = 10
    lr0: float = 1e-3
    lr_decay_per_epoch: float = 0.95
    batch_size: int = 32
    steps_per_epoch: int = 50
    seed: int = 0
    freeze_mode: str = "none"
    precision: str = "float32"
    apc_shift: int = 8
    mask_proportion: float = 0.5
    loss_norm: str = "l1"
    codebook_size: int = 64
    kappa: float = 0.1
    beta: float = 0.1
    diversity_sign: float = 1.0
    tau_start: float = 2.0
    tau_end: float = 0.5
    tau_decay: float = 0.9995
    alpha: float = 0.9
    utt_codebook_size: int = 32
    tap_layer: int = 2
    standardize_anchor_input: bool = True
    grad_clip: float = 5.0
    finetune_attention: str = "none"
    test_fraction: float = 0.0
    save_every_epoch: bool = True
    audit_frozen: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.freeze_mode not in FREEZE_MODES:
            raise ValueError(f"freeze_mode must be one of {FREEZE_MODES}, got {self.freeze_mode!r}")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError("lr_decay_per_epoch must be in (0, 1]")
        if self.finetune_attention not in ("inherit", "none", "causal"):
            raise ValueError("finetune_attention must be inherit, none or causal")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in [0, 1)")
        resolve_dtype(self.precision)

    @property
    def base_method(self) -> str:
        return self.method.rstrip("+")

    @property
    def uwdb(self) -> bool:
        return self.method.endswith("+")

    def uwdb_config(self) -> UwdbConfig:
        return UwdbConfig(self.alpha, self.beta, self.kappa, self.utt_codebook_size, self.tap_layer,
                          self.diversity_sign, self.standardize_anchor_input)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``: ``lr0 * decay ** epoch``."""
    return cfg.lr0 * cfg.lr_decay_per_epoch**epoch


def attention_for(method: str) -> str:
    return "causal" if method.rstrip("+") == "apc" else "none"


def derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(*key: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*key))


def batch_indices(n: int, batch_size: int, steps: int, seed: int, epoch: int, stream: int = _BATCH):
    """Per-step index arrays, drawn by walking fresh seeded permutations of range(n)."""
    rng = np.random.default_rng(derive_seed(seed, epoch, stream))
    bs = min(batch_size, n)
    pool = np.empty(0, dtype=np.int64)
    out = []
    for _ in range(steps):
        if len(pool) < bs:
            pool = np.concatenate([pool, rng.permutation(n)])
        out.append(np.sort(pool[:bs]))
        pool = pool[bs:]
    return out


def feature_stats(frames: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    flat = frames.reshape(-1, frames.shape[-1]).astype(np.float64)
    return flat.mean(0), np.maximum(flat.std(0), 1e-3)


@dataclass
class LogRow:
    epoch: int
    step: int
    loss: float
    lr: float
    extra: Dict[str, float] = field(default_factory=dict)


@dataclass
class TrainRun:
    """Outcome of one loop: per-step log, epoch summary, checkpoints written."""

    config: dict
    rows: List[LogRow] = field(default_factory=list)
    wall_ms: List[float] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    lineage: List[str] = field(default_factory=list)
    audit: Dict[str, float] = field(default_factory=dict)
    metrics: Dict[str, list] = field(default_factory=dict)

    def epoch_means(self, key: str = "loss") -> List[float]:
        by_epoch: Dict[int, List[float]] = {}
        for r in self.rows:
            v = r.loss if key == "loss" else r.extra[key]
            by_epoch.setdefault(r.epoch, []).append(v)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def log_csv(self) -> str:
        extra_keys = sorted(self.rows[0].extra) if self.rows else []
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "step", "loss", "lr"] + extra_keys)
        for r in self.rows:
            w.writerow([r.epoch, r.step, repr(r.loss), repr(r.lr)] + [repr(r.extra[k]) for k in extra_keys])
        return buf.getvalue()

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(self.config, indent=2, sort_keys=True) + "\n")
        (out_dir / "log.csv").write_text(self.log_csv())
        with open(out_dir / "timing.csv", "w") as f:
            f.write("epoch,wall_ms\n")
            for e, ms in enumerate(self.wall_ms):
                f.write(f"{e},{ms:.1f}\n")
        if self.metrics:
            (out_dir / "metrics.json").write_text(json.dumps(self.metrics, indent=2) + "\n")
        if self.audit:
            (out_dir / "audit.json").write_text(json.dumps(self.audit, indent=2) + "\n")


def _check_finite(loss: torch.Tensor, step: int, batch: np.ndarray) -> None:
    if not torch.isfinite(loss).all():
        raise NumericalError(f"non-finite loss at step {step}; batch ids {batch.tolist()}")


def _clip(params, max_norm: float) -> None:
    params = [p for p in params if p.grad is not None]
    if max_norm and params:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


# --- pretext forward ---------------------------------------------------------


def batch_mask(t: int, batch: int, proportion: float, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, step, _MASK))
    return np.stack([make_mask_plan(t, proportion, rng).mask for _ in range(batch)])


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    if mask.shape[-1] % 2:
        mask = np.concatenate([mask, np.zeros(mask.shape[:-1] + (1,), dtype=bool)], -1)
    return mask[..., 0::2] | mask[..., 1::2]


def pretext_forward(model: EncoderModel, feats: torch.Tensor, cfg: TrainConfig, step: int,
                    straight_through: bool = True, clean: Optional[torch.Tensor] = None):
    """Pretext loss for ``cfg.base_method``; returns (loss, per-block outputs).

    ``clean`` optionally supplies the stop-gradient frontend output of the
    unmasked input that CL quantizes into targets.
    """
    method = cfg.base_method
    x = model.normalize(feats)
    targets = frontend_targets(x)
    if method == "apc":
        h, blocks = model.run(x, "causal")
        y = model.decoder(model.representation(blocks, h))
        return apc_loss(targets, y, cfg.apc_shift, cfg.loss_norm), blocks
    mask = batch_mask(x.shape[1], x.shape[0], cfg.mask_proportion, cfg.seed, step)
    weights = torch.from_numpy(downsample_mask(mask)).to(x.dtype)
    h, blocks = model.run(model.apply_mask_embedding(x, torch.from_numpy(mask)), "none")
    y = model.decoder(model.representation(blocks, h))
    if method == "mpc":
        return mpc_loss(targets, y, weights, cfg.loss_norm), blocks
    if model.quant is None:
        raise ValueError("contrastive pretraining needs a model with a codebook")
    if clean is None:
        with torch.no_grad():
            clean = model.frontend(x)
    model.quant.tau = temperature_at(step, cfg.tau_start, cfg.tau_end, cfg.tau_decay)
    gen = torch_generator(cfg.seed, step, _GUMBEL)
    q = model.quant(clean, train_mode=True, generator=gen, straight_through=straight_through)
    loss = cl_frame_loss(y, q, model.quant.entries, weights, cfg.kappa, cfg.beta, cfg.diversity_sign)
    return loss, blocks


def uwdb_forward(model: EncoderModel, booster: Booster, feats: torch.Tensor, cfg: TrainConfig, step: int,
                 straight_through: bool = True, clean: Optional[torch.Tensor] = None):
    """Returns (combined, s3rl, utt) losses for one batch."""
    l_s3rl, blocks = pretext_forward(model, feats, cfg, step, straight_through, clean)
    u1 = pool_tap(blocks, cfg.tap_layer)
    booster.codebook.tau = temperature_at(step, cfg.tau_start, cfg.tau_end, cfg.tau_decay)
    u2 = booster.frozen_embedding(feats, attention_for(cfg.method))
    gen = torch_generator(cfg.seed, step, _UTT_GUMBEL)
    q, _ = anchor(booster.anchor_input(u2), booster.codebook, True, gen, straight_through)
    l_utt = utt_loss(u1, q, booster.codebook, cfg.kappa, cfg.beta, cfg.diversity_sign)
    return combined_loss(l_s3rl, l_utt, cfg.alpha), l_s3rl, l_utt


# --- pretraining ---------------------------------------------------------------


def build_model(model_cfg: ModelConfig, cfg: TrainConfig, frames: Optional[np.ndarray] = None) -> EncoderModel:
    torch.manual_seed(derive_seed(cfg.seed, 0, 99))
    if cfg.base_method == "cl" and not model_cfg.codebook_size:
        model_cfg = replace(model_cfg, codebook_size=cfg.codebook_size)
    model = EncoderModel(model_cfg).to(resolve_dtype(cfg.precision))
    check_budget(model)
    if frames is not None:
        mean, std = feature_stats(frames)
        model.norm_mean.copy_(torch.from_numpy(mean))
        model.norm_std.copy_(torch.from_numpy(std))
    return model


def _meta(cfg: TrainConfig, epoch: int, lineage: Sequence[str]) -> dict:
    return {"method": cfg.method, "attention": attention_for(cfg.method), "epoch": epoch,
            "lineage": list(lineage)}


def pretrain(
    cfg: TrainConfig,
    frames: np.ndarray,
    model_cfg: ModelConfig = ModelConfig(),
    out_dir=None,
    init_checkpoint=None,
    step1_checkpoint=None,
) -> Tuple[EncoderModel, TrainRun]:
    """Self-supervised pretraining on an unlabeled (N, T, 64) feature array.

    Plain methods train one encoder. ``"+"`` methods first obtain a step-1
    encoder (``step1_checkpoint`` or a fresh plain run into ``out_dir/step1``),
    then train a warm-started copy against the frozen step-1 tower.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if cfg.method == "scratch":
        raise ValueError("scratch has no pretraining stage")
    if cfg.uwdb:
        base_cfg = replace(cfg, method=cfg.base_method)
        if step1_checkpoint is None:
            step1_dir = out_dir / "step1" if out_dir is not None else None
            _, run1 = pretrain(base_cfg, frames, model_cfg, step1_dir, init_checkpoint)
            if step1_dir is None:
                raise ValueError("two-step training without out_dir needs step1_checkpoint")
            step1_checkpoint = run1.checkpoints[-1]
        return _pretrain_uwdb(cfg, frames, step1_checkpoint, out_dir)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    dtype = resolve_dtype(cfg.precision)
    lineage = []
    if init_checkpoint is not None:
        loaded, _ = ckpt.load_model(init_checkpoint, dtype=dtype)
        model = build_model(loaded.cfg, cfg)
        model.load_state_dict(loaded.state_dict())
        lineage.append(ckpt.file_digest(init_checkpoint))
    else:
        model = build_model(model_cfg, cfg, frames)
    run = TrainRun(config={"train": asdict(cfg), "model": model.cfg.to_dict()}, lineage=lineage)
    data = torch.from_numpy(frames).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8)

    def step_fn(batch, step):
        loss, _ = pretext_forward(model, data[batch], cfg, step)
        _check_finite(loss, step, batch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        _clip(model.parameters(), cfg.grad_clip)
        opt.step()
        return loss.item(), {}

    def save(epoch):
        if out_dir is None:
            return
        path = out_dir / f"ckpt-epoch-{epoch}.bin"
        ckpt.save_model(path, model, _meta(cfg, epoch, lineage))
        run.checkpoints.append(str(path))

    _loop(cfg, cfg.epochs_pretrain, len(frames), [opt], step_fn, save, run, _BATCH)
    if out_dir is not None:
        run.write(out_dir)
    return model, run


def _pretrain_uwdb(cfg: TrainConfig, frames: np.ndarray, step1_checkpoint, out_dir):
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    dtype = resolve_dtype(cfg.precision)
    lineage = [ckpt.file_digest(step1_checkpoint)]
    base, meta1 = ckpt.load_model(step1_checkpoint, dtype=dtype)
    if meta1.get("method") != cfg.base_method:
        raise ValueError(f"step-1 checkpoint was trained with {meta1.get('method')!r}, not {cfg.base_method!r}")
    model = build_model(base.cfg, cfg)
    model.load_state_dict(base.state_dict())
    torch.manual_seed(derive_seed(cfg.seed, 0, 98))
    booster = Booster(base, cfg.uwdb_config()).to(dtype)
    data = torch.from_numpy(frames).to(dtype)
    booster.calibrate(data, attention_for(cfg.method))
    if cfg.audit_frozen:
        for p in booster.frozen.parameters():
            p.requires_grad_(True)
    frozen_before = {n: p.detach().clone() for n, p in booster.frozen.named_parameters()}
    run = TrainRun(config={"train": asdict(cfg), "model": model.cfg.to_dict(),
                           "step1_checkpoint": str(step1_checkpoint)}, lineage=lineage)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8)
    opt_q = torch.optim.Adam(booster.codebook.parameters(), lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8)
    frozen_grad_max = 0.0

    def step_fn(batch, step):
        nonlocal frozen_grad_max
        loss, l_s3rl, l_utt = uwdb_forward(model, booster, data[batch], cfg, step)
        _check_finite(loss, step, batch)
        opt.zero_grad(set_to_none=True)
        opt_q.zero_grad(set_to_none=True)
        loss.backward()
        _clip(model.parameters(), cfg.grad_clip)
        _clip(booster.codebook.parameters(), cfg.grad_clip)
        opt.step()
        opt_q.step()
        for p in booster.frozen.parameters():
            if p.grad is not None:
                frozen_grad_max = max(frozen_grad_max, p.grad.abs().max().item())
        return loss.item(), {"loss_s3rl": l_s3rl.item(), "loss_utt": l_utt.item()}

    def save(epoch):
        if out_dir is None:
            return
        path = out_dir / f"ckpt-epoch-{epoch}.bin"
        meta = {"kind": "uwdb", "model": model.cfg.to_dict(), "alpha": cfg.alpha, **_meta(cfg, epoch, lineage)}
        records = [("lwt1." + n, t, False) for n, t in ckpt.module_state(model).items()]
        records += [("lwt2." + n, t, True) for n, t in ckpt.module_state(booster.frozen).items()]
        records += [("uttq." + n, t, False) for n, t in ckpt.module_state(booster.codebook).items()]
        records += [("uttq." + n, getattr(booster, n), False) for n in ("anchor_mean", "anchor_std")]
        ckpt.save(path, meta, records)
        run.checkpoints.append(str(path))

    _loop(cfg, cfg.epochs_uwdb, len(frames), [opt, opt_q], step_fn, save, run, _BATCH)
    unchanged = all(torch.equal(frozen_before[n], p) for n, p in booster.frozen.named_parameters())
    run.audit = {"frozen_grad_max_abs": frozen_grad_max, "frozen_unchanged": float(unchanged)}
    if out_dir is not None:
        run.write(out_dir)
    model.booster = booster  # keep reachable for callers that inspect the second tower
    return model, run


def _loop(cfg: TrainConfig, epochs: int, n: int, opts, step_fn: Callable, save: Callable, run: TrainRun,
          stream: int) -> None:
    step = 0
    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        for opt in opts:
            for g in opt.param_groups:
                g["lr"] = lr
        for batch in batch_indices(n, cfg.batch_size, cfg.steps_per_epoch, cfg.seed, epoch, stream):
            loss, extra = step_fn(batch, step)
            run.rows.append(LogRow(epoch, step, loss, lr, extra))
            step += 1
        run.wall_ms.append(1000.0 * (time.perf_counter() - t0))
        logger.info("epoch %d lr %.3g loss %.5f", epoch, lr, run.epoch_means()[-1])
        if cfg.save_every_epoch or epoch == epochs - 1:
            save(epoch)


# --- fine-tuning ---------------------------------------------------------------


def predict(model: EncoderModel, frames: np.ndarray, attention: str = "none", batch_size: int = 256) -> np.ndarray:
    """Class posteriors for an (N, T, 64) array."""
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(frames), batch_size):
            x = torch.from_numpy(frames[i : i + batch_size]).to(dtype)
            out.append(torch.softmax(model.logits(x, attention), -1).double().numpy())
    return np.concatenate(out)


def finetune(
    cfg: TrainConfig,
    frames: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    checkpoint=None,
    model_cfg: ModelConfig = ModelConfig(),
    test: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    out_dir=None,
) -> Tuple[EncoderModel, TrainRun]:
    """Cross-entropy training of a linear classifier on mean-pooled final-layer outputs.

    ``checkpoint=None`` trains from scratch. ``freeze_mode="encoder_frozen"``
    updates only the classifier head.
    """
    from .metrics import accuracy

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    dtype = resolve_dtype(cfg.precision)
    lineage = []
    torch.manual_seed(derive_seed(cfg.seed, 0, 97))
    if checkpoint is not None:
        head = ckpt.load(checkpoint)[0]["model"].get("classifier_classes", 0)
        if head not in (0, num_classes):
            raise ckpt.CheckpointError(
                f"checkpoint/config mismatch: classifier has {head} classes, corpus class count is {num_classes}")
        model, meta = ckpt.load_model(checkpoint, dtype=dtype, classifier_classes=num_classes)
        pretrained_attention = meta.get("attention", "none")
        lineage.append(ckpt.file_digest(checkpoint))
    else:
        model = build_model(replace(model_cfg, classifier_classes=num_classes), replace(cfg, method="scratch"), frames)
        pretrained_attention = "none"
    check_budget(model)
    attention = pretrained_attention if cfg.finetune_attention == "inherit" else cfg.finetune_attention
    if cfg.freeze_mode == "encoder_frozen":
        for p in model.encoder_parameters():
            p.requires_grad_(False)
        params = list(model.classifier.parameters())
    else:
        params = [p for p in model.parameters()]
    run = TrainRun(config={"train": asdict(cfg), "model": model.cfg.to_dict(), "attention": attention,
                           "checkpoint": None if checkpoint is None else str(checkpoint)}, lineage=lineage)
    data = torch.from_numpy(frames).to(dtype)
    target = torch.from_numpy(labels)
    opt = torch.optim.Adam(params, lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8)
    run.metrics = {"train_accuracy": [], "test_accuracy": []}

    def step_fn(batch, step):
        loss = F.cross_entropy(model.logits(data[batch], attention), target[batch])
        _check_finite(loss, step, batch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        _clip(params, cfg.grad_clip)
        opt.step()
        return loss.item(), {}

    def save(epoch):
        run.metrics["train_accuracy"].append(accuracy(predict(model, frames, attention).argmax(1), labels))
        if test is not None:
            run.metrics["test_accuracy"].append(accuracy(predict(model, test[0], attention).argmax(1), test[1]))
        if out_dir is None:
            return
        path = out_dir / f"ckpt-epoch-{epoch}.bin"
        meta = {"stage": "finetune", "freeze_mode": cfg.freeze_mode, "num_classes": num_classes,
                **_meta(cfg, epoch, lineage)}
        meta["attention"] = attention
        ckpt.save_model(path, model, meta)
        run.checkpoints.append(str(path))

    _loop(replace(cfg, save_every_epoch=True), cfg.epochs_finetune, len(frames), [opt], step_fn, save, run,
          _FT_BATCH)
    if out_dir is not None:
        run.write(out_dir)
    return model, run
