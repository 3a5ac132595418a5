"""Finite-difference check of every training loss on a toy-sized model in float64."""

from __future__ import annotations

import time
from dataclasses import replace
from typing import Dict, Optional

import numpy as np
import torch

from .model import EncoderModel, ModelConfig, count_params
from .trainer import TrainConfig, pretext_forward, uwdb_forward
from .uwdb import Booster

TOY_MODEL = ModelConfig(d_model=16, n_heads=2, ffn_dim=24, n_blocks=3, conv_channels=(2, 4, 4), codebook_size=8)
TOY_TRAIN = TrainConfig(method="apc", precision="float64", apc_shift=2, mask_proportion=0.5,
                        codebook_size=8, utt_codebook_size=8, seed=5)
TOLERANCE = 1e-4


def toy_setup(seed: int = 0, batch: int = 3, frames: int = 24):
    torch.manual_seed(seed)
    model = EncoderModel(TOY_MODEL).double()
    tower = EncoderModel(TOY_MODEL).double()
    booster = Booster(tower, replace(TOY_TRAIN, method="apc+").uwdb_config()).double()
    feats = torch.randn(batch, frames, TOY_MODEL.input_dim, dtype=torch.float64, generator=torch.Generator().manual_seed(seed + 1))
    return model, booster, feats


def loss_functions(model: EncoderModel, booster: Booster, feats: torch.Tensor, step: int = 3):
    """Closures for each loss, shaped so the differenced function is the one autograd sees.

    Quantizers run in soft mode (the straight-through path is checked
    separately) and the stop-gradient CL target features are computed once
    and held constant.
    """
    with torch.no_grad():
        clean = model.frontend(model.normalize(feats)).clone()

    def pretext(method):
        cfg = replace(TOY_TRAIN, method=method)
        return lambda: pretext_forward(model, feats, cfg, step, False, clean)[0]

    def utt():
        cfg = replace(TOY_TRAIN, method="apc+")
        return uwdb_forward(model, booster, feats, cfg, step, False, clean)[2]

    def combined(method):
        cfg = replace(TOY_TRAIN, method=method + "+")
        return lambda: uwdb_forward(model, booster, feats, cfg, step, False, clean)[0]

    return {
        "apc": pretext("apc"),
        "mpc": pretext("mpc"),
        "cl": pretext("cl"),
        "utt": utt,
        "combined_apc": combined("apc"),
        "combined_cl": combined("cl"),
    }


def run_suite(num_coords: Optional[int] = 300, seed: int = 0, h: float = 1e-6) -> Dict[str, float]:
    from .numerics import grad_check

    model, booster, feats = toy_setup(seed)
    params = {n: p for n, p in model.named_parameters()}
    params.update({"uttq." + n: p for n, p in booster.codebook.named_parameters()})
    out = {}
    for name, f in loss_functions(model, booster, feats).items():
        out[name] = grad_check(f, params, h=h, num_coords=num_coords, seed=seed)
    return out


def toy_param_count() -> int:
    model, booster, _ = toy_setup()
    return count_params(model) + count_params(booster.codebook)


def main(num_coords: Optional[int] = 300, seed: int = 0, echo=print) -> bool:
    t0 = time.perf_counter()
    echo(f"toy model: {toy_param_count()} trainable parameters (float64)")
    ok = True
    for name, err in run_suite(num_coords, seed).items():
        passed = err < TOLERANCE
        ok &= passed
        echo(f"{'PASS' if passed else 'FAIL'} {name:14s} max rel err {err:.3e}")
    echo(f"elapsed {time.perf_counter() - t0:.1f}s")
    return ok
