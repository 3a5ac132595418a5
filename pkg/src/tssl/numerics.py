"""Gradient plumbing on top of torch autograd, plus an independent finite-difference checker."""

from __future__ import annotations

import math
from typing import Callable, Dict, Mapping, Optional

import numpy as np
import torch


class NumericalError(RuntimeError):
    pass


class _Counter:
    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


degenerate_similarity = _Counter()


DTYPES = {"float64": torch.float64, "float32": torch.float32}


def resolve_dtype(mode: str) -> torch.dtype:
    try:
        return DTYPES[mode]
    except KeyError:
        raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {mode!r}") from None


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for each named parameter.

    Parameters the loss does not depend on get exact zeros.
    """
    if loss.numel() != 1:
        raise NumericalError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = [n for n, p in params.items() if p.requires_grad]
    grads = torch.autograd.grad(
        loss.reshape(()), [params[n] for n in names], allow_unused=True, retain_graph=True
    )
    out = {}
    for n, p in params.items():
        out[n] = torch.zeros_like(p)
    for n, g in zip(names, grads):
        if g is not None:
            out[n] = g.detach().clone(memory_format=torch.contiguous_format)
    return out


def _sample_coords(params: Mapping[str, torch.Tensor], num_coords: Optional[int], rng):
    """Pick coordinates to probe: at least one per tensor, the rest uniform over all values."""
    names = list(params)
    sizes = np.array([params[n].numel() for n in names])
    total = int(sizes.sum())
    if num_coords is None or num_coords >= total:
        return [(n, i) for n in names for i in range(params[n].numel())]
    coords = [(n, int(rng.integers(params[n].numel()))) for n in names]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in rng.choice(total, size=max(0, num_coords - len(names)), replace=False):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        coords.append((names[k], int(flat - offsets[k])))
    return coords


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-5,
    num_coords: Optional[int] = 200,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` closes over ``params`` and must be deterministic. Each probed
    coordinate is perturbed in place by +-h and restored. Relative error is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    for n, p in params.items():
        if p.dtype != torch.float64:
            raise ValueError(f"grad_check needs float64 parameters; {n} is {p.dtype}")
    loss = f()
    analytic = backward(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, i in _sample_coords(params, num_coords, rng):
            flat = params[name].view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericalError(f"non-finite loss when perturbing {name}[{i}]")
            numeric = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)[i].item()
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


def _safe_norm(x: torch.Tensor, dim: int):
    sq = (x * x).sum(dim)
    return torch.sqrt(torch.where(sq > 0, sq, torch.ones_like(sq))), sq > 0


def cosine_sim(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine similarity along ``dim`` with broadcasting.

    A zero-norm operand yields 0 (and a zero gradient) instead of NaN; such
    events are tallied in ``degenerate_similarity``.
    """
    na, oka = _safe_norm(a, dim)
    nb, okb = _safe_norm(b, dim)
    dot = (a * b).sum(dim)
    ok = oka & okb
    if not bool(ok.all()):
        degenerate_similarity.add((~ok).sum().item())
    return torch.where(ok, dot / (na * nb), torch.zeros_like(dot))


def mean_pool(x: torch.Tensor, dim: int = -2) -> torch.Tensor:
    return x.mean(dim)
