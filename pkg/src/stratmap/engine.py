"""Episode execution: sequential milestone selection, driving, auto-skip."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Protocol, Sequence

from .selection import RngStream, SelectionPolicy, select_next
from .strategy_map import AbstractState, Milestone, StrategyMap

logger = logging.getLogger(__name__)

OUTCOMES = ("achieved", "failed", "skipped")
MAX_AGENT_RETRIES = 2
RECENT_STEPS = 8


class EnvironmentFault(RuntimeError):
    pass


class AgentFault(ValueError):
    """Raised by an agent whose output could not be turned into an action."""


class BadK(ValueError):
    pass


@dataclass
class EngineConfig:
    max_steps: int = 120
    patience_unvisited: int = 40
    patience_visited: int = 20
    episodes: int = 50

    def __post_init__(self):
        for name in ("max_steps", "patience_unvisited", "patience_visited", "episodes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience_unvisited < self.patience_visited:
            raise ValueError("patience_unvisited must be >= patience_visited")


@dataclass
class StepRecord:
    step: int
    observation: str
    action: str
    reward: float
    milestone: Optional[str] = None
    completed_flag: bool = False
    info: dict[str, Any] = field(default_factory=dict)


@dataclass
class AttemptRecord:
    milestone: str
    outcome: str = "failed"
    reward: float = 0.0
    start_step: int = 0
    end_step: int = 0
    steps: int = 0
    reason: str = ""


@dataclass
class Trajectory:
    episode_index: int
    steps: list[StepRecord] = field(default_factory=list)
    final_score: float = 0.0
    attempted: list[AttemptRecord] = field(default_factory=list)
    initial_observation: str = ""
    initial_info: dict[str, Any] = field(default_factory=dict)
    noop_steps: int = 0

    def attempt_rewards(self) -> dict[str, float]:
        return {a.milestone: a.reward for a in self.attempted}

    def to_records(self) -> list[dict]:
        rows = [{"type": "step", "episode": self.episode_index, **asdict(s)} for s in self.steps]
        rows.append({
            "type": "episode",
            "episode": self.episode_index,
            "final_score": self.final_score,
            "attempted": [asdict(a) for a in self.attempted],
            "initial_observation": self.initial_observation,
            "initial_info": self.initial_info,
            "noop_steps": self.noop_steps,
        })
        return rows

    @classmethod
    def from_records(cls, rows: Sequence[dict]) -> "Trajectory":
        steps, footer = [], None
        for row in rows:
            row = dict(row)
            kind = row.pop("type")
            episode = row.pop("episode")
            if kind == "step":
                steps.append(StepRecord(**row))
            else:
                footer = (episode, row)
        if footer is None:
            raise ValueError("trajectory records lack an episode footer")
        episode, row = footer
        return cls(
            episode, steps, row["final_score"],
            [AttemptRecord(**a) for a in row["attempted"]],
            row.get("initial_observation", ""), row.get("initial_info", {}),
            row.get("noop_steps", 0),
        )


def read_trajectories(path) -> list[Trajectory]:
    """Parse a line-delimited trajectory log into trajectories."""
    groups: dict[int, list[dict]] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                groups.setdefault(row["episode"], []).append(row)
    return [Trajectory.from_records(groups[k]) for k in sorted(groups)]


@dataclass
class AgentContext:
    """What the agent sees besides the raw observation."""

    milestone: Optional[Milestone]
    deps: list[Milestone]
    lessons: list[Any]
    recent_steps: list[StepRecord]
    step: int
    max_steps: int
    score: float
    valid_actions: list[str]


@dataclass
class AgentOutput:
    action: str
    completed: bool = False
    reasoning: str = ""


class Agent(Protocol):
    def begin_episode(self, episode_index: int, rng: RngStream) -> None: ...
    def act(self, observation: str, ctx: AgentContext) -> AgentOutput: ...
    def end_episode(self, trajectory: Trajectory) -> None: ...


class Environment(Protocol):
    #: When true, milestone_status is authoritative and the agent's flag is ignored.
    ground_truth: bool

    def reset(self) -> str: ...
    def step(self, action: str) -> tuple[str, float, bool]: ...
    def valid_actions(self) -> list[str]: ...
    def milestone_status(self, milestone: Milestone) -> Optional[str]: ...
    def step_info(self) -> dict: ...


def _agent_act(agent: Agent, observation: str, ctx: AgentContext) -> Optional[AgentOutput]:
    for attempt in range(MAX_AGENT_RETRIES + 1):
        try:
            return agent.act(observation, ctx)
        except AgentFault as exc:
            logger.info("malformed agent output (attempt %d): %s", attempt + 1, exc)
    return None


def run_episode(
    smap: StrategyMap,
    env: Environment,
    agent: Agent,
    policy: SelectionPolicy,
    cfg: EngineConfig,
    rng: RngStream,
    episode_index: int = 1,
    lessons: Sequence[Any] = (),
    ignore_deps: bool = False,
) -> Trajectory:
    try:
        obs = env.reset()
        info0 = env.step_info()
    except Exception as exc:
        raise EnvironmentFault(f"reset failed: {exc}") from exc
    agent.begin_episode(episode_index, rng)
    traj = Trajectory(episode_index, initial_observation=obs, initial_info=info0)
    state = AbstractState({smap.root})
    current: Optional[AttemptRecord] = None
    patience = 0
    need_select = True
    score = 0.0

    def close(outcome: str, reason: str = "") -> None:
        nonlocal current, need_select
        current.outcome, current.reason = outcome, reason
        if outcome == "achieved":
            state.achieved.add(current.milestone)
        else:
            state.failed_or_skipped.add(current.milestone)
        current, need_select = None, True

    for step in range(1, cfg.max_steps + 1):
        while need_select:
            need_select = False
            chosen = select_next(smap, state, policy, rng, ignore_deps=ignore_deps)
            if chosen is None:
                break
            current = AttemptRecord(chosen, start_step=step)
            traj.attempted.append(current)
            unvisited = smap.stats[chosen].n == 0
            patience = cfg.patience_unvisited if unvisited else cfg.patience_visited
            if env.ground_truth and env.milestone_status(smap.milestones[chosen]) == "achieved":
                current.end_step = step - 1
                close("achieved", "already satisfied when selected")

        m = smap.milestones[current.milestone] if current else None
        ctx = AgentContext(
            milestone=m,
            deps=[smap.milestones[d] for d in sorted(m.deps) if d != smap.root] if m else [],
            lessons=list(lessons),
            recent_steps=traj.steps[-RECENT_STEPS:],
            step=step,
            max_steps=cfg.max_steps,
            score=score,
            valid_actions=env.valid_actions(),
        )
        out = _agent_act(agent, obs, ctx)
        try:
            if out is None:
                traj.noop_steps += 1
                reward, done, action, flag = 0.0, False, "", False
            else:
                action, flag = out.action, out.completed
                obs, reward, done = env.step(action)
            info = env.step_info()
        except Exception as exc:
            raise EnvironmentFault(f"step {step} failed: {exc}") from exc
        reward = float(reward)
        score += reward
        traj.steps.append(StepRecord(
            step, obs, action, reward, current.milestone if current else None, flag, info,
        ))

        if current is not None:
            current.reward += reward
            current.steps += 1
            current.end_step = step
            if env.ground_truth:
                status = env.milestone_status(m)
                achieved, failed = status == "achieved", status == "failed"
            else:
                achieved, failed = flag, False
            if achieved:
                close("achieved")
            elif failed:
                close("failed", "attempt failed")
            elif current.steps >= patience:
                close("skipped", f"no completion within {patience} steps")
        if done:
            break

    if current is not None:
        current.outcome, current.reason = "failed", "episode ended before completion"
    traj.final_score = score
    agent.end_episode(traj)
    return traj


def final_k(scores: Sequence[float], k: int) -> float:
    if not 1 <= k <= len(scores):
        raise BadK(f"k={k} outside 1..{len(scores)}")
    tail = list(scores)[-k:]
    return sum(tail) / k
