"""Synthetic milestone MDP with a known ground-truth DAG.

Each step the agent names one milestone to attempt. The attempt can only
succeed if the true prerequisites were achieved earlier in the episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from ..selection import RngStream
from ..strategy_map import (
    EditOp, Milestone, MilestoneStats, StrategyMap, UnknownMilestone, new_map, topological_order,
)


@dataclass
class SyntheticMdpSpec:
    true_deps: dict[str, frozenset[str]]
    success_prob: dict[str, float] = field(default_factory=dict)
    reward_mean: dict[str, float] = field(default_factory=dict)
    reward_std: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.true_deps = {k: frozenset(v) for k, v in self.true_deps.items()}
        for v, deps in self.true_deps.items():
            unknown = deps - set(self.true_deps)
            if unknown:
                raise ValueError(f"{v}: unknown prerequisite(s) {sorted(unknown)}")
        for v in self.true_deps:
            self.success_prob.setdefault(v, 1.0)
            self.reward_mean.setdefault(v, 0.0)
            self.reward_std.setdefault(v, 0.0)
            if not 0.0 <= self.success_prob[v] <= 1.0:
                raise ValueError(f"{v}: success probability outside [0, 1]")
        # acyclicity check via the map's own topological sort
        as_map(self)

    @classmethod
    def flat(cls, means, std: float = 1.0, success_prob: float = 1.0, seed: int = 0) -> "SyntheticMdpSpec":
        ids = [f"arm-{i}" for i in range(len(means))]
        return cls(
            {v: frozenset() for v in ids},
            {v: success_prob for v in ids},
            {v: float(m) for v, m in zip(ids, means)},
            {v: float(std) for v in ids},
            seed,
        )


def as_map(spec: SyntheticMdpSpec) -> StrategyMap:
    """The ground-truth DAG as a strategy map with fresh statistics."""
    smap = new_map()
    smap.milestones.update({
        v: Milestone(v, f"Complete {v}", [f"attempt {v}"], deps or {smap.root})
        for v, deps in spec.true_deps.items()
    })
    smap.stats.update({v: MilestoneStats() for v in spec.true_deps})
    topological_order(smap)
    return smap


def synthetic_attempt(spec: SyntheticMdpSpec, milestone: str, achieved: set[str], rng: RngStream) -> tuple[bool, float]:
    if milestone not in spec.true_deps:
        raise UnknownMilestone(milestone)
    if not spec.true_deps[milestone] <= achieved:
        return False, 0.0
    if rng.random() >= spec.success_prob[milestone]:
        return False, 0.0
    return True, rng.normal(spec.reward_mean[milestone], spec.reward_std[milestone])


class SyntheticEnv:
    ground_truth = True

    def __init__(self, spec: SyntheticMdpSpec):
        self.spec = spec
        self.rng = RngStream(spec.seed)
        self.achieved: set[str] = set()
        self._last: Optional[tuple[str, bool]] = None

    def reseed(self, rng: RngStream) -> None:
        self.rng = rng

    def reset(self) -> str:
        self.achieved = set()
        self._last = None
        return "Nothing attempted yet."

    def step(self, action: str) -> tuple[str, float, bool]:
        parts = action.split(maxsplit=1)
        if len(parts) != 2 or parts[0] != "attempt" or parts[1] not in self.spec.true_deps:
            self._last = None
            return f"Unrecognized action {action!r}.", 0.0, False
        target = parts[1]
        ok, reward = synthetic_attempt(self.spec, target, self.achieved, self.rng)
        if ok:
            self.achieved.add(target)
        self._last = (target, ok)
        return f"{target}: {'success' if ok else 'failure'}.", reward, False

    def valid_actions(self) -> list[str]:
        return [f"attempt {v}" for v in sorted(self.spec.true_deps)]

    def milestone_status(self, milestone: Milestone) -> Optional[str]:
        if self._last is None or self._last[0] != milestone.id:
            return None
        return "achieved" if self._last[1] else "failed"

    def step_info(self) -> dict:
        if self._last is None:
            return {}
        return {"attempted": self._last[0], "success": self._last[1],
                "achieved": sorted(self.achieved)}


class SyntheticOracle:
    """Ground-truth proposers: refinement realigns deps of attempted nodes to
    the true prerequisites; fork discovery adds true milestones that became
    available in some episode but are absent from the map."""

    def __init__(self, spec: SyntheticMdpSpec):
        self.spec = spec

    def _true_deps_in_map(self, smap: StrategyMap, v: str) -> Optional[frozenset[str]]:
        deps = self.spec.true_deps[v]
        if not deps <= set(smap.milestones):
            return None
        return deps or frozenset({smap.root})

    def unexplored(self, traj) -> list[str]:
        achieved = set()
        for s in traj.steps:
            achieved.update(s.info.get("achieved", ()))
        tried = {a.milestone for a in traj.attempted}
        return sorted(v for v, deps in self.spec.true_deps.items()
                      if deps <= achieved and v not in achieved and v not in tried)

    def refinement_ops(self, smap: StrategyMap, trajectories) -> list[EditOp]:
        ops = []
        seen = set()
        for traj in trajectories:
            for a in traj.attempted:
                v = a.milestone
                if v in seen or v not in smap or v not in self.spec.true_deps:
                    continue
                seen.add(v)
                deps = self._true_deps_in_map(smap, v)
                if deps is not None and deps != smap.deps(v):
                    ops.append(EditOp("update_deps", {"target": v, "deps": set(deps)}))
        return ops

    def fork_ops(self, smap: StrategyMap, trajectories) -> list[EditOp]:
        ops, proposed = [], set()
        for traj in trajectories:
            for v in self.unexplored(traj):
                if v in smap or v in proposed:
                    continue
                deps = self._true_deps_in_map(smap, v)
                if deps is None:
                    continue
                proposed.add(v)
                ops.append(EditOp("add_child", {"milestone": Milestone(
                    v, f"Complete {v}", [f"attempt {v}"], deps)}, origin="fork_discovery"))
        return ops
