"""Classification accuracy and detection metrics (FAR at matched FRR)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredTrial:
    score: float
    is_target: bool


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    frr: float  # FN / (FN + TP)
    far: float  # FP / (FP + TN)


Trials = Union[Sequence[ScoredTrial], Tuple[np.ndarray, np.ndarray]]


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise MetricError(f"need equal, non-empty lengths; got {predictions.shape} and {labels.shape}")
    return float(np.mean(predictions == labels))


def _split(trials: Trials) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(trials, tuple):
        scores, is_target = (np.asarray(a) for a in trials)
    else:
        scores = np.array([t.score for t in trials], dtype=np.float64)
        is_target = np.array([t.is_target for t in trials], dtype=bool)
    scores, is_target = scores.astype(np.float64), is_target.astype(bool)
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    if is_target.all() or not is_target.any():
        raise MetricError("need at least one target and one non-target trial")
    return scores[is_target], scores[~is_target]


def thresholds(scores: np.ndarray) -> np.ndarray:
    """-inf, midpoints between consecutive distinct scores, +inf."""
    u = np.unique(scores)
    return np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])


def det_points(trials: Trials) -> List[OperatingPoint]:
    """All distinct operating points, by rising threshold; a trial is accepted when score >= threshold."""
    tar, non = _split(trials)
    th = thresholds(np.concatenate([tar, non]))
    fn = np.searchsorted(np.sort(tar), th, side="left")
    fp = len(non) - np.searchsorted(np.sort(non), th, side="left")
    return [OperatingPoint(float(t), f / len(tar), a / len(non)) for t, f, a in zip(th, fn, fp)]


def operating_point(trials: Trials, threshold: float) -> OperatingPoint:
    tar, non = _split(trials)
    return OperatingPoint(threshold, float(np.sum(tar < threshold) / len(tar)),
                          float(np.sum(non >= threshold) / len(non)))


def point_at_frr(trials: Trials, frr: float) -> OperatingPoint:
    """Operating point whose FRR is closest to ``frr``; ties go to the lower threshold."""
    return min(det_points(trials), key=lambda p: (abs(p.frr - frr), p.threshold))


def relative_far_report(candidate: Trials, baseline: Trials, baseline_threshold: float = 0.5) -> dict:
    """FAR of ``candidate`` over FAR of ``baseline``, both read at the baseline's FRR.

    The baseline's FRR comes from its own ``baseline_threshold``. Both models
    are then read through the same closest-FRR rule, so a model compared
    against itself scores exactly 1.0.
    """
    target_frr = operating_point(baseline, baseline_threshold).frr
    base = point_at_frr(baseline, target_frr)
    if base.far == 0:
        raise MetricError("degenerate baseline: FAR is 0 at the baseline operating point")
    cand = point_at_frr(candidate, target_frr)
    return {
        "frr": cand.frr,
        "far": cand.far,
        "threshold": cand.threshold,
        "baseline_frr": base.frr,
        "baseline_far": base.far,
        "baseline_threshold": base.threshold,
        "relative_far": cand.far / base.far,
    }


def relative_far(candidate: Trials, baseline: Trials, baseline_threshold: float = 0.5) -> float:
    return relative_far_report(candidate, baseline, baseline_threshold)["relative_far"]


def read_trials(path) -> Tuple[np.ndarray, np.ndarray]:
    """Trials CSV with header ``score,is_target``; is_target accepts 1/0/true/false."""
    scores, flags = [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or {"score", "is_target"} - set(reader.fieldnames):
            raise MetricError(f"{path}: expected header score,is_target")
        for row in reader:
            scores.append(float(row["score"]))
            flags.append(row["is_target"].strip().lower() in ("1", "true", "yes"))
    return np.array(scores), np.array(flags, dtype=bool)


def write_trials(path, scores, is_target) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["score", "is_target"])
        for s, t in zip(scores, is_target):
            w.writerow([repr(float(s)), int(bool(t))])
