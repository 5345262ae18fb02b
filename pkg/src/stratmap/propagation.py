"""Return propagation: credit attempted milestones and update their statistics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .strategy_map import StrategyMap, UnknownMilestone, topological_order

logger = logging.getLogger(__name__)


@dataclass
class AttributedRewards:
    episode_index: int
    rewards: dict[str, float]
    attempted: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.attempted:
            self.attempted = list(self.rewards)
        if set(self.rewards) != set(self.attempted):
            raise ValueError("rewards and attempted must cover the same milestones")
        if len(set(self.attempted)) != len(self.attempted):
            raise ValueError("attempted milestones must be distinct")


@dataclass
class CreditAssignment:
    credits: dict[str, float]
    gamma: float
    episode_index: int = 0

    def to_record(self) -> dict:
        return {"episode": self.episode_index, "gamma": self.gamma, "credits": dict(self.credits)}


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")


def _check_known(smap: StrategyMap, ids) -> None:
    missing = sorted(v for v in ids if v not in smap)
    if missing:
        raise UnknownMilestone(f"unknown milestone(s): {', '.join(missing)}")


def compute_credits_dag(smap: StrategyMap, attributed: AttributedRewards, gamma: float) -> CreditAssignment:
    """Credit each attempted node with its reward plus discounted credit of
    attempted direct successors, in one reverse topological pass."""
    _check_gamma(gamma)
    _check_known(smap, attributed.attempted)
    attempted = set(attributed.attempted)
    credits: dict[str, float] = {}
    for v in reversed(topological_order(smap)):
        if v not in attempted:
            continue
        downstream = sum(credits[u] for u in smap.successors(v) if u in attempted)
        credits[v] = attributed.rewards[v] + gamma * downstream
    return CreditAssignment({v: credits[v] for v in attributed.attempted}, gamma, attributed.episode_index)


def compute_credits_sequential(attributed: AttributedRewards, gamma: float) -> CreditAssignment:
    """Discount along the episode's attempt order, ignoring dependency edges."""
    _check_gamma(gamma)
    credits: dict[str, float] = {}
    running = 0.0
    for v in reversed(attributed.attempted):
        running = attributed.rewards[v] + gamma * running
        credits[v] = running
    return CreditAssignment({v: credits[v] for v in attributed.attempted}, gamma, attributed.episode_index)


def update_stats(smap: StrategyMap, credits: CreditAssignment) -> None:
    _check_known(smap, credits.credits)
    for v, g in credits.credits.items():
        smap.stats[v].update(g)


def restrict_to_map(smap: StrategyMap, attributed: AttributedRewards) -> AttributedRewards:
    """Drop reward entries for nodes no longer in the map (pruned during refinement)."""
    gone = [v for v in attributed.attempted if v not in smap]
    if not gone:
        return attributed
    logger.warning("episode %d: dropping rewards for pruned node(s) %s",
                   attributed.episode_index, ", ".join(gone))
    kept = [v for v in attributed.attempted if v in smap]
    return AttributedRewards(attributed.episode_index, {v: attributed.rewards[v] for v in kept}, kept)
