"""The periodic reflection cycle run every ``interval_n`` episodes.

Stage order is fixed: map refinement, return propagation on the refined
map, fork discovery (until the freeze episode), attempt notes, stuck-node
diagnosis, lesson extraction.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

from .engine import Trajectory
from .llm.base import ProposerFault, Proposers
from .propagation import (
    AttributedRewards, compute_credits_dag, compute_credits_sequential, restrict_to_map, update_stats,
)
from .strategy_map import AbstractState, AttemptNote, EditOp, StrategyMap, apply_ops, eligible_set

logger = logging.getLogger(__name__)

LESSON_CATEGORIES = ("penalty", "navigation", "mechanic")
PROPOSER_RETRIES = 2
FORK_KINDS = ("add_child", "add_branch")


@dataclass
class EpisodeSummary:
    episode_index: int
    achieved: list[str] = field(default_factory=list)
    penalties: list[str] = field(default_factory=list)
    not_achieved: list[dict] = field(default_factory=list)
    unexplored: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeSummary":
        return cls(**d)


@dataclass
class ReflectionConfig:
    interval_n: int = 5
    gamma: float = 0.6
    max_fork_ops: int = 6
    max_new_lessons: int = 5
    lesson_capacity: int = 20
    freeze_episode: int = 30
    stuck_min_visits: int = 3
    stuck_max_mean: float = 0.0
    diagnosis_cooldown: Optional[int] = None

    def __post_init__(self):
        if self.interval_n < 1:
            raise ValueError("interval_n must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("max_fork_ops", "max_new_lessons", "lesson_capacity", "stuck_min_visits"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.diagnosis_cooldown is None:
            self.diagnosis_cooldown = 2 * self.interval_n


@dataclass
class Lesson:
    category: str
    text: str
    added_episode: int = 0

    def __post_init__(self):
        self.category = str(self.category).lower()
        if self.category not in LESSON_CATEGORIES:
            raise ValueError(f"unknown lesson category {self.category!r}")
        if not str(self.text).strip():
            raise ValueError("lesson text must be non-empty")

    def render(self) -> str:
        return f"[{self.category.upper()}] {self.text}"


@dataclass
class CycleReport:
    episode: int
    stage_order: list[str] = field(default_factory=list)
    accepted_ops: list[dict] = field(default_factory=list)
    rejected_ops: list[dict] = field(default_factory=list)
    dropped_fork_ops: int = 0
    credits: list[dict] = field(default_factory=list)
    notes_added: int = 0
    diagnoses: list[dict] = field(default_factory=list)
    lessons_added: list[dict] = field(default_factory=list)
    lessons_rejected: list[str] = field(default_factory=list)
    skipped_stages: list[str] = field(default_factory=list)
    proposer_failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fork_additions(self) -> int:
        return sum(1 for op in self.accepted_ops
                   if op["origin"] == "fork_discovery" and op["kind"] in FORK_KINDS)


def _op_record(op: EditOp, stage: str, seq: int, reason: str = "") -> dict:
    rec = {"stage": stage, "seq": seq, "kind": op.kind, "origin": op.origin, "op": op.describe()}
    if reason:
        rec["reason"] = reason
    return rec


def _call(report: CycleReport, stage: str, fn: Callable, *args):
    for attempt in range(PROPOSER_RETRIES + 1):
        try:
            return fn(*args)
        except ProposerFault as exc:
            logger.info("%s proposer failed (attempt %d): %s", stage, attempt + 1, exc)
            last = exc
    report.proposer_failures.append(f"{stage}: {last}")
    raise last


# -- summaries -------------------------------------------------------------


def rule_based_summary(
    traj: Trajectory, smap: StrategyMap, unexplored: Callable[[Trajectory], list[str]] | None = None
) -> EpisodeSummary:
    """Summary sections derived from the trajectory's recorded outcomes."""
    achieved_ids = [a.milestone for a in traj.attempted if a.outcome == "achieved"]
    achieved_set = {smap.root, *(a for a in achieved_ids if a in smap)}
    not_achieved = []
    for a in traj.attempted:
        if a.outcome == "achieved":
            continue
        missing = sorted(smap.deps(a.milestone) - achieved_set) if a.milestone in smap else []
        not_achieved.append({"id": a.milestone, "reason": a.reason or a.outcome, "missing": missing})
    tried = {a.milestone for a in traj.attempted}
    for v in sorted(eligible_set(smap, AbstractState(achieved_set)) - tried):
        not_achieved.append({"id": v, "reason": "not attempted", "missing": []})
    penalties = [f"step {s.step}: {s.action} ({s.reward:+g})" for s in traj.steps if s.reward < 0]
    return EpisodeSummary(
        traj.episode_index,
        achieved=achieved_ids,
        penalties=penalties,
        not_achieved=not_achieved,
        unexplored=list(unexplored(traj)) if unexplored else [],
    )


def summarize_episode(traj: Trajectory, smap: StrategyMap, proposers: Proposers) -> EpisodeSummary:
    try:
        return proposers.summarize(traj, smap)
    except ProposerFault as exc:
        logger.warning("episode %d: summary proposer failed (%s); using outcomes only",
                       traj.episode_index, exc)
        return rule_based_summary(traj, smap)


# -- individual stages -----------------------------------------------------


def guard_refinement(smap: StrategyMap, op: EditOp) -> Optional[str]:
    """Refinement may not rename a node that has earned a positive mean."""
    if op.kind != "update_node" or "description" not in op.payload:
        return None
    target = op.payload.get("target")
    if target in smap and smap.stats[target].mean_reward > 0:
        if op.payload["description"] != smap.milestones[target].description:
            return "RenameRejected: node has confirmed rewards"
    return None


def attempt_notes(traj: Trajectory) -> list[tuple[str, AttemptNote]]:
    out = []
    for a in traj.attempted:
        if a.outcome == "achieved":
            note = AttemptNote(traj.episode_index, "achieved", a.reward, a.end_step)
        else:
            note = AttemptNote(traj.episode_index, "failed", a.reward, a.end_step,
                               a.reason or a.outcome)
        out.append((a.milestone, note))
    return out


def stuck_candidates(smap: StrategyMap, cfg: ReflectionConfig) -> list[str]:
    return [v for v in smap.ids() if v != smap.root
            and smap.stats[v].n >= cfg.stuck_min_visits
            and smap.stats[v].mean_reward <= cfg.stuck_max_mean]


def diagnose_stuck_nodes(
    smap: StrategyMap, proposers: Proposers, cfg: ReflectionConfig, episode_t: int
) -> list[tuple[str, str]]:
    out = []
    for v in stuck_candidates(smap, cfg):
        last = smap.stats[v].last_diagnosed_episode
        if last is not None and episode_t - last < cfg.diagnosis_cooldown:
            continue
        try:
            guidance = proposers.diagnose(smap, v)
        except ProposerFault as exc:
            logger.info("diagnosis of %s failed: %s", v, exc)
            continue
        smap.milestones[v].guidance = guidance
        smap.stats[v].last_diagnosed_episode = episode_t
        out.append((v, guidance))
    return out


def extract_lessons(
    window: Sequence[EpisodeSummary],
    existing: list[Lesson],
    proposers: Proposers,
    cfg: ReflectionConfig,
    episode_t: int = 0,
    rejected: Optional[list[str]] = None,
) -> list[Lesson]:
    """Return the updated lesson buffer (oldest evicted first)."""
    if not window:
        return list(existing)
    try:
        raw = proposers.lessons(window, existing)
    except ProposerFault as exc:
        logger.info("lesson proposer failed: %s", exc)
        return list(existing)
    known = {(l.category, l.text) for l in existing}
    new: list[Lesson] = []
    for cand in raw:
        try:
            if isinstance(cand, Lesson):
                lesson = Lesson(cand.category, cand.text, episode_t)
            else:
                lesson = Lesson(cand.get("category", ""), cand.get("text", ""), episode_t)
        except (ValueError, AttributeError) as exc:
            logger.info("rejected lesson %r: %s", cand, exc)
            if rejected is not None:
                rejected.append(f"{cand!r}: {exc}")
            continue
        if (lesson.category, lesson.text) in known:
            continue
        known.add((lesson.category, lesson.text))
        new.append(lesson)
        if len(new) == cfg.max_new_lessons:
            break
    buffer = list(existing) + new
    return buffer[-cfg.lesson_capacity:]


# -- the cycle -------------------------------------------------------------


def run_reflection_cycle(
    smap: StrategyMap,
    window: Sequence[EpisodeSummary],
    trajectories: Sequence[Trajectory],
    proposers: Proposers,
    cfg: ReflectionConfig,
    episode_t: int,
    lessons: Optional[list[Lesson]] = None,
    propagation: str = "dag",
    fork_discovery: bool = True,
    check_schedule: bool = True,
) -> tuple[CycleReport, list[Lesson]]:
    """Run one cycle in place on ``smap``; returns the report and new lesson buffer.

    ``check_schedule=False`` allows a manually triggered cycle at any episode.
    """
    if check_schedule and episode_t % cfg.interval_n:
        raise ValueError(f"episode {episode_t} is not a reflection episode (N={cfg.interval_n})")
    if len(window) != len(trajectories):
        raise ValueError("window and trajectories must align")
    report = CycleReport(episode_t)
    seq = itertools.count()

    # (1) map refinement
    report.stage_order.append("refinement")
    try:
        ops = _call(report, "refinement", proposers.refine, smap, window, trajectories)
    except ProposerFault:
        report.skipped_stages.append("refinement")
        ops = []
    for op in ops:
        reason = guard_refinement(smap, op)
        if reason:
            report.rejected_ops.append(_op_record(op, "refinement", next(seq), reason))
            continue
        accepted, rejected = apply_ops(smap, [op])
        for a in accepted:
            report.accepted_ops.append(_op_record(a, "refinement", next(seq)))
        for r, why in rejected:
            report.rejected_ops.append(_op_record(r, "refinement", next(seq), why))

    # (2) return propagation against the refined map
    report.stage_order.append("propagation")
    for summary, traj in zip(window, trajectories):
        try:
            attributed = _call(report, "reward", proposers.attribute_rewards, summary, traj, smap)
        except ProposerFault:
            continue
        attributed = restrict_to_map(smap, attributed)
        if propagation == "sequential":
            credit = compute_credits_sequential(attributed, cfg.gamma)
        else:
            credit = compute_credits_dag(smap, attributed, cfg.gamma)
        update_stats(smap, credit)
        report.credits.append({**credit.to_record(), "seq": next(seq)})

    # (3) fork discovery
    report.stage_order.append("fork_discovery")
    if not fork_discovery or episode_t >= cfg.freeze_episode:
        report.skipped_stages.append("fork_discovery")
    else:
        try:
            ops = _call(report, "fork", proposers.fork, smap, window, trajectories)
        except ProposerFault:
            report.skipped_stages.append("fork_discovery")
            ops = []
        ops = [dataclasses.replace(op, origin="fork_discovery") for op in ops]
        if len(ops) > cfg.max_fork_ops:
            logger.info("dropping %d fork op(s) over the cap of %d",
                        len(ops) - cfg.max_fork_ops, cfg.max_fork_ops)
            report.dropped_fork_ops = len(ops) - cfg.max_fork_ops
            ops = ops[:cfg.max_fork_ops]
        for op in ops:
            if op.kind not in FORK_KINDS:
                report.rejected_ops.append(_op_record(op, "fork_discovery", next(seq),
                                                      "fork discovery may only add nodes"))
                continue
            accepted, rejected = apply_ops(smap, [op])
            for a in accepted:
                report.accepted_ops.append(_op_record(a, "fork_discovery", next(seq)))
            for r, why in rejected:
                report.rejected_ops.append(_op_record(r, "fork_discovery", next(seq), why))

    # (4) attempt notes from the window
    report.stage_order.append("attempt_notes")
    for traj in trajectories:
        for v, note in attempt_notes(traj):
            if v in smap:
                smap.stats[v].add_note(note)
                report.notes_added += 1

    # (5) stuck-node diagnosis
    report.stage_order.append("diagnosis")
    for v, text in diagnose_stuck_nodes(smap, proposers, cfg, episode_t):
        report.diagnoses.append({"id": v, "guidance": text})

    # (6) global lessons
    report.stage_order.append("lessons")
    before = list(lessons or [])
    after = extract_lessons(window, before, proposers, cfg, episode_t, report.lessons_rejected)
    kept_old = {id(l) for l in before}
    report.lessons_added = [dataclasses.asdict(l) for l in after if id(l) not in kept_old]
    return report, after


def lessons_to_dicts(lessons: Sequence[Lesson]) -> list[dict[str, Any]]:
    return [dataclasses.asdict(l) for l in lessons]


def lessons_from_dicts(rows: Sequence[dict]) -> list[Lesson]:
    return [Lesson(**r) for r in rows]
