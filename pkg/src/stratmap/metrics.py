"""Run-level metrics: coverage entropy, Final-K aggregates, policy comparison."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import final_k


class InsufficientData(ValueError):
    pass


def coverage_entropy(heatmap) -> float:
    """Shannon entropy (nats) of a visit-proportion grid; 0 for an empty grid."""
    p = np.asarray(heatmap, dtype=float).ravel()
    total = p.sum()
    if total <= 0:
        return 0.0
    p = p[p > 0] / total
    return float(-(p * np.log(p)).sum())


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator)."""
    if len(values) < 2:
        raise InsufficientData(f"need at least two values, got {len(values)}")
    return statistics.fmean(values), statistics.stdev(values)


@dataclass
class RunReport:
    """Outcome of one seed of one configuration."""

    label: str
    seed: int
    scores: list[float]
    entropy: float = 0.0
    reached: dict[str, bool] = field(default_factory=dict)
    calls: dict[str, int] = field(default_factory=dict)
    map_size: int = 1
    fork_nodes: int = 0

    def final(self, k: int) -> float:
        return final_k(self.scores, k)

    @property
    def cumulative(self) -> float:
        return math.fsum(self.scores)

    def to_dict(self) -> dict:
        return {
            "label": self.label, "seed": self.seed, "scores": list(self.scores),
            "entropy": self.entropy, "reached": dict(self.reached), "calls": dict(self.calls),
            "map_size": self.map_size, "fork_nodes": self.fork_nodes,
        }


def compare_policies(reports: Sequence[RunReport], k: int = 5) -> dict[str, dict[str, float]]:
    """Per-label mean and sample std of Final-K across seeds.

    Reports are grouped by label and sorted by seed inside each group, so
    the result does not depend on input order.
    """
    groups: dict[str, list[RunReport]] = {}
    for r in reports:
        groups.setdefault(r.label, []).append(r)
    out = {}
    for label in sorted(groups):
        rows = sorted(groups[label], key=lambda r: r.seed)
        finals = [r.final(k) for r in rows]
        mean, std = mean_std(finals)
        out[label] = {"final_k_mean": mean, "final_k_std": std, "seeds": len(rows)}
    return out
