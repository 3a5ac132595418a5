"""Desk-scale comparison of scratch, APC and APC+uwdb fine-tuning on the synthetic corpus."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .features import SynthCorpusSpec, stack_frames, synthesize_corpus
from .model import ModelConfig
from .trainer import TrainConfig, finetune, pretrain

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskSetup:
    """Corpus sizes and schedules for one seed of the comparison.

    Each split is drawn from its own seed offset so pretraining, labeled
    fine-tuning and test utterances never coincide.
    """

    num_classes: int = 10
    pretrain_per_class: int = 200  # 2000 unlabeled utterances
    finetune_per_class: int = 20  # 200 labeled utterances
    test_per_class: int = 50
    noise_level: float = 2.5
    method: str = "apc"
    epochs_pretrain: int = 20
    epochs_uwdb: int = 10
    epochs_finetune: int = 10
    # one fine-tuning epoch is one pass over the labeled set
    finetune_passes_per_epoch: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    def corpus(self, per_class: int, seed: int):
        utts = synthesize_corpus(SynthCorpusSpec(self.num_classes, per_class, 1.0, seed, self.noise_level))
        return stack_frames(utts).astype(np.float32), np.array([u.label for u in utts])


def run_seed(setup: DeskSetup, seed: int, out_dir=None) -> Dict[str, float]:
    """Test accuracy of scratch, pretrained and uwdb-boosted models for one seed."""
    t0 = time.perf_counter()
    pt_x, _ = setup.corpus(setup.pretrain_per_class, 1000 + seed)
    ft_x, ft_y = setup.corpus(setup.finetune_per_class, 2000 + seed)
    te_x, te_y = setup.corpus(setup.test_per_class, 3000 + seed)
    out = Path(out_dir) if out_dir is not None else None

    cfg = TrainConfig(method=setup.method, seed=seed, epochs_pretrain=setup.epochs_pretrain,
                      epochs_uwdb=setup.epochs_uwdb, epochs_finetune=setup.epochs_finetune,
                      save_every_epoch=False)
    sub = (lambda name: out / name) if out is not None else (lambda name: None)
    _, plain = pretrain(cfg, pt_x, setup.model, sub("pretrain"))
    # the plain run is the step-1 model of the two-step run
    plain_ckpt = plain.checkpoints[-1] if plain.checkpoints else None
    if plain_ckpt is None:
        raise ValueError("desk experiment needs out_dir to hand checkpoints between stages")
    _, boosted = pretrain(replace(cfg, method=setup.method + "+"), pt_x, setup.model, sub("uwdb"),
                          step1_checkpoint=plain_ckpt)

    steps = setup.finetune_passes_per_epoch * math.ceil(len(ft_x) / cfg.batch_size)
    ft_cfg = replace(cfg, steps_per_epoch=steps)
    results = {}
    for name, ck in (("scratch", None), (setup.method, plain_ckpt), (setup.method + "+", boosted.checkpoints[-1])):
        _, run = finetune(ft_cfg, ft_x, ft_y, setup.num_classes, ck, setup.model, (te_x, te_y),
                          sub(f"finetune-{name}"))
        results[name] = run.metrics["test_accuracy"][-1]
    results["seconds"] = time.perf_counter() - t0
    logger.info("seed %d: %s", seed, results)
    return results
