"""Spearman rank correlation and accuracy, plus the report object the CLI prints."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UndefinedMetricError


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_x[1:] != sorted_x[:-1]])
    ends = np.r_[starts[1:], len(x)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def spearman(pred, truth) -> float:
    """Pearson correlation of the average-rank vectors.

    Raises UndefinedMetricError for fewer than two points or a constant side.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"spearman: inputs must be 1-D of equal length, got {p.shape} and {t.shape}")
    if len(p) < 2:
        raise UndefinedMetricError("spearman needs at least two points")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise UndefinedMetricError("spearman: non-finite input")
    rp, rt = average_ranks(p), average_ranks(t)
    dp, dt = rp - rp.mean(), rt - rt.mean()
    sxx, syy = float(dp @ dp), float(dt @ dt)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedMetricError("spearman is undefined for a constant input")
    r = float(dp @ dt) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def accuracy(pred_prob, truth, threshold: float = 0.5) -> float:
    """Fraction of examples where (prob >= threshold) equals the 0/1 truth."""
    p = np.asarray(pred_prob, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or len(p) == 0:
        raise ValueError(f"accuracy: inputs must be non-empty 1-D of equal length, got {p.shape} and {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("accuracy: truth labels must be 0 or 1")
    return float(np.mean((p >= threshold) == (t == 1)))


def metric_for(task: str) -> str:
    return "accuracy" if task in ("classification", "binary_classification") else "spearman"


def compute_metric(task: str, pred, truth) -> float:
    return accuracy(pred, truth) if metric_for(task) == "accuracy" else spearman(pred, truth)


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    n_examples: int
    per_split: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        if self.metric == "spearman" and not -1.0 <= self.value <= 1.0:
            raise ValueError(f"spearman value {self.value} outside [-1, 1]")
        if self.metric == "accuracy" and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"accuracy value {self.value} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))

    def table(self) -> str:
        rows = [(self.task, "all", self.metric, self.value, self.n_examples)]
        for split, entry in sorted(self.per_split.items()):
            rows.append((self.task, split, self.metric, entry["value"], entry["n_examples"]))
        lines = [f"{'task':<16}{'split':<8}{'metric':<10}{'value':>10}{'n':>8}"]
        lines += [f"{t:<16.16}{s:<8}{m:<10}{v:>10.4f}{n:>8d}" for t, s, m, v, n in rows]
        return "\n".join(lines)
