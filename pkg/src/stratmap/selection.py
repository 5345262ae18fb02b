"""Milestone selection over the eligible set.

Unvisited milestones always go first (uniformly at random among them);
otherwise the policy's score function picks the argmax, ties broken by id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .strategy_map import AbstractState, MilestoneStats, StrategyMap, eligible_set

POLICY_KINDS = ("thompson", "ucb", "epsilon_greedy")


class DegenerateLog(ValueError):
    pass


@dataclass(frozen=True)
class SelectionPolicy:
    kind: str = "thompson"
    c: float = 10.0
    epsilon: float = 0.1
    sigma_prior: float = 100.0
    sigma_min: float = 1.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not self.sigma_prior >= self.sigma_min > 0:
            raise ValueError("need sigma_prior >= sigma_min > 0")


class RngStream:
    """Seeded random stream (PCG64); same seed gives the same draws."""

    def __init__(self, seed: int | list[int] | tuple[int, ...] = 0):
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    @classmethod
    def for_episode(cls, seed: int, episode_index: int) -> "RngStream":
        return cls([int(seed), int(episode_index)])

    def standard_normal(self) -> float:
        return float(self._gen.standard_normal())

    def random(self) -> float:
        return float(self._gen.random())

    def integers(self, n: int) -> int:
        return int(self._gen.integers(n))

    def choice(self, items):
        items = list(items)
        return items[self.integers(len(items))]

    def normal(self, mean: float, std: float) -> float:
        return mean + std * self.standard_normal()


def thompson_sigma(stats: MilestoneStats, policy: SelectionPolicy) -> float:
    if stats.n <= 1:
        return policy.sigma_prior
    return max(math.sqrt(stats.variance / stats.n), policy.sigma_min)


def thompson_score(stats: MilestoneStats, policy: SelectionPolicy, rng: RngStream) -> float:
    return stats.mean_reward + thompson_sigma(stats, policy) * rng.standard_normal()


def ucb_score(stats: MilestoneStats, total_eligible_visits: int, policy: SelectionPolicy) -> float:
    if total_eligible_visits < 1:
        raise DegenerateLog("UCB needs at least one visit among eligible milestones")
    log_total = max(math.log(total_eligible_visits), 0.0)
    return stats.mean_reward + policy.c * math.sqrt(log_total / stats.n)


def _argmax(ids: list[str], scores: list[float]) -> str:
    best, best_score = ids[0], scores[0]
    for v, s in zip(ids[1:], scores[1:]):
        if s > best_score:
            best, best_score = v, s
    return best


def select_next(
    smap: StrategyMap,
    state: AbstractState,
    policy: SelectionPolicy,
    rng: RngStream,
    ignore_deps: bool = False,
) -> Optional[str]:
    ids = sorted(eligible_set(smap, state, ignore_deps=ignore_deps))
    if not ids:
        return None
    unvisited = [v for v in ids if smap.stats[v].n == 0]
    if unvisited:
        return rng.choice(unvisited)
    stats = [smap.stats[v] for v in ids]
    if policy.kind == "thompson":
        return _argmax(ids, [thompson_score(s, policy, rng) for s in stats])
    if policy.kind == "ucb":
        total = sum(s.n for s in stats)
        return _argmax(ids, [ucb_score(s, total, policy) for s in stats])
    if rng.random() < policy.epsilon:
        return rng.choice(ids)
    return _argmax(ids, [s.mean_reward for s in stats])
