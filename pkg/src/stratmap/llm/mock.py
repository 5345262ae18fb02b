"""Offline proposers: a scripted chat replay and ground-truth rule twins."""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, Sequence

from ..propagation import AttributedRewards
from ..reflection import EpisodeSummary, rule_based_summary
from .base import ProposerFault
from .client import ChatRequest, ChatResponse


class ScriptExhausted(ProposerFault):
    pass


class ScriptedChat:
    """Replays canned replies in order; records every request it receives."""

    def __init__(self, replies: Iterable[str]):
        self.replies = list(replies)
        self.requests: list[ChatRequest] = []

    def chat(self, request: ChatRequest) -> ChatResponse:
        self.requests.append(request)
        if not self.replies:
            raise ScriptExhausted("scripted chat has no replies left")
        return ChatResponse(self.replies.pop(0))


class RuleBasedProposers:
    """Deterministic proposer suite over an environment oracle.

    The oracle supplies ``unexplored(traj)``, ``refinement_ops(smap, trajs)``
    and ``fork_ops(smap, trajs)``. Everything else is derived from what the
    trajectory recorded, so no randomness is involved.
    """

    def __init__(self, oracle):
        self.oracle = oracle
        self.calls: Counter = Counter()

    def state_dict(self) -> dict:
        oracle = self.oracle.state_dict() if hasattr(self.oracle, "state_dict") else {}
        return {"calls": dict(self.calls), "oracle": oracle}

    def load_state_dict(self, state: dict) -> None:
        self.calls = Counter(state.get("calls", {}))
        if hasattr(self.oracle, "load_state_dict"):
            self.oracle.load_state_dict(state.get("oracle", {}))

    def summarize(self, trajectory, smap) -> EpisodeSummary:
        self.calls["summary"] += 1
        return rule_based_summary(trajectory, smap, self.oracle.unexplored)

    def refine(self, smap, summaries, trajectories):
        self.calls["refinement"] += 1
        return self.oracle.refinement_ops(smap, trajectories)

    def fork(self, smap, summaries, trajectories):
        self.calls["fork"] += 1
        return self.oracle.fork_ops(smap, trajectories)

    def attribute_rewards(self, summary, trajectory, smap) -> AttributedRewards:
        self.calls["reward"] += 1
        rewards: dict[str, float] = {}
        for a in trajectory.attempted:
            rewards[a.milestone] = rewards.get(a.milestone, 0.0) + a.reward
        return AttributedRewards(trajectory.episode_index, rewards)

    def diagnose(self, smap, node_id: str) -> str:
        self.calls["diagnosis"] += 1
        notes = smap.stats[node_id].attempt_notes
        reasons = Counter(n.failure_reason for n in notes if n.outcome == "failed")
        missing = sorted(d for d in smap.deps(node_id) if d != smap.root)
        parts = []
        if reasons:
            reason, count = reasons.most_common(1)[0]
            parts.append(f"Root cause: {count} recent attempt(s) ended with '{reason}'.")
        else:
            parts.append("Root cause: attempts complete but earn nothing.")
        actions = smap.milestones[node_id].key_actions
        if actions:
            parts.append(f"Next action: follow {' then '.join(actions)} without detours.")
        if missing:
            parts.append(f"Missing prerequisite: confirm {', '.join(missing)} first.")
        return " ".join(parts)

    def lessons(self, summaries: Sequence[EpisodeSummary], existing) -> list[dict]:
        self.calls["lessons"] += 1
        out = []
        for s in summaries:
            for p in s.penalties:
                action = re.sub(r"^step \d+: ", "", p)
                out.append({"category": "penalty", "text": f"Avoid {action}"})
            for row in s.not_achieved:
                if row.get("missing"):
                    out.append({"category": "navigation",
                                "text": f"{row['id']} needs {', '.join(row['missing'])} first"})
            for v in s.achieved:
                out.append({"category": "mechanic", "text": f"{v} can be completed"})
        return out


def mock_proposers(oracle) -> RuleBasedProposers:
    return RuleBasedProposers(oracle)
