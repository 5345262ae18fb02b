"""Proposer interface shared by the live and mock backends."""

from __future__ import annotations

from typing import Protocol, Sequence


class ProposerFault(RuntimeError):
    """A proposer could not produce a usable payload."""


class Proposers(Protocol):
    """Everything the reflection cycle asks of a language model.

    Every method may raise :class:`ProposerFault`. ``calls`` counts
    invocations per method name.
    """

    calls: dict[str, int]

    def summarize(self, trajectory, smap) -> "EpisodeSummary": ...

    def refine(self, smap, summaries: Sequence, trajectories: Sequence) -> list: ...

    def attribute_rewards(self, summary, trajectory, smap) -> "AttributedRewards": ...

    def fork(self, smap, summaries: Sequence, trajectories: Sequence) -> list: ...

    def diagnose(self, smap, node_id: str) -> str: ...

    def lessons(self, summaries: Sequence, existing: Sequence) -> list: ...
