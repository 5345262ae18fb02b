"""Scripted agents: the two collapse baselines and the map-following drivers."""

from __future__ import annotations

import re
from collections import deque
from typing import Optional

from ..engine import AgentContext, AgentOutput, Trajectory
from ..selection import RngStream
from .maze import OPPOSITE, normalize_direction, target_room

_ROOM_RE = re.compile(r"You are in the (.+?)\. Exits: (.*)\.")


def parse_room(observation: str) -> tuple[Optional[str], list[str]]:
    m = _ROOM_RE.search(observation)
    if not m:
        return None, []
    exits = [e.strip() for e in m.group(2).split(",") if e.strip()]
    return m.group(1), exits


class StaticRandomAgent:
    """No memory: a uniformly random valid action every step."""

    kind = "static_random"

    def __init__(self):
        self.rng = RngStream(0)

    def begin_episode(self, episode_index: int, rng: RngStream) -> None:
        self.rng = rng

    def act(self, observation: str, ctx: AgentContext) -> AgentOutput:
        if not ctx.valid_actions:
            return AgentOutput("wait")
        return AgentOutput(self.rng.choice(ctx.valid_actions))

    def end_episode(self, trajectory: Trajectory) -> None:
        pass

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        pass


class ExploitGreedyAgent(StaticRandomAgent):
    """Replays the best-scoring past episode's actions verbatim.

    Acts randomly until some episode has earned a positive score, and after
    the replayed sequence runs out.
    """

    kind = "exploit_greedy"

    def __init__(self):
        super().__init__()
        self.best_actions: list[str] = []
        self.best_score = 0.0
        self._cursor = 0

    def begin_episode(self, episode_index: int, rng: RngStream) -> None:
        super().begin_episode(episode_index, rng)
        self._cursor = 0

    def act(self, observation: str, ctx: AgentContext) -> AgentOutput:
        if self._cursor < len(self.best_actions):
            action = self.best_actions[self._cursor]
            self._cursor += 1
            return AgentOutput(action)
        return super().act(observation, ctx)

    def end_episode(self, trajectory: Trajectory) -> None:
        if trajectory.final_score > self.best_score:
            self.best_score = trajectory.final_score
            self.best_actions = [s.action for s in trajectory.steps]

    def state_dict(self) -> dict:
        return {"best_actions": list(self.best_actions), "best_score": self.best_score}

    def load_state_dict(self, state: dict) -> None:
        self.best_actions = list(state.get("best_actions", []))
        self.best_score = float(state.get("best_score", 0.0))


class MazeNavigatorAgent(StaticRandomAgent):
    """Walks to the room named by the active milestone.

    Remembers every room-to-room move it has made, and assumes the reverse
    move leads back. It takes the shortest
    remembered route to the target room. Failing that, it walks to the
    parent milestone's room and replays the milestone's key actions. When
    the plan is longer than the steps left, it tries an untaken exit of the
    current room instead. With no active milestone it wanders at random.
    """

    kind = "maze_navigator"

    def __init__(self):
        super().__init__()
        self.transitions: dict[str, dict[str, str]] = {}
        self.start_room: Optional[str] = None
        self._prev: Optional[tuple[str, str]] = None

    def begin_episode(self, episode_index: int, rng: RngStream) -> None:
        super().begin_episode(episode_index, rng)
        self._prev = None

    def _route(self, src: str, dst: str) -> Optional[list[str]]:
        if src == dst:
            return []
        seen = {src: []}
        q = deque([src])
        while q:
            room = q.popleft()
            for d, nxt in sorted(self.transitions.get(room, {}).items()):
                if nxt not in seen:
                    seen[nxt] = seen[room] + [d]
                    if nxt == dst:
                        return seen[nxt]
                    q.append(nxt)
        return None

    def act(self, observation: str, ctx: AgentContext) -> AgentOutput:
        room, exits = parse_room(observation)
        if self._prev is not None and room is not None and room != self._prev[0]:
            src, d = self._prev
            self.transitions.setdefault(src, {})[d] = room
            if d in OPPOSITE:  # passages are two-way
                self.transitions.setdefault(room, {}).setdefault(OPPOSITE[d], src)
        if ctx.step == 1 and self.start_room is None:
            self.start_room = room
        action = self._choose(room, exits, ctx)
        self._prev = (room, normalize_direction(action)) if room else None
        return AgentOutput(action)

    def _plan(self, room: str, ctx: AgentContext) -> Optional[list[str]]:
        """Moves believed to reach the milestone's room, or None if unknown."""
        target = target_room(ctx.milestone)
        if target is None:
            return None
        route = self._route(room, target)
        if route is not None:
            return route
        # Follow the milestone's moves from its parent room as far as they are known.
        parent = target_room(ctx.deps[0]) if ctx.deps else self.start_room
        actions = ctx.milestone.key_actions
        if parent is None or not actions:
            return None
        path = [parent]
        for a in actions[:-1]:
            nxt = self.transitions.get(path[-1], {}).get(a)
            if nxt is None:
                break
            path.append(nxt)
        if room in path:
            i = max(k for k, r in enumerate(path) if r == room)
            return list(actions[i:])
        route = self._route(room, path[-1])
        if route is None:
            return None
        return route + list(actions[len(path) - 1:])

    def _explore(self, room: Optional[str], exits: list[str]) -> str:
        """Prefer an exit of this room never taken before."""
        fresh = [d for d in exits if d not in self.transitions.get(room, {})]
        return self.rng.choice(fresh or exits) if exits else "wait"

    def _choose(self, room: Optional[str], exits: list[str], ctx: AgentContext) -> str:
        if room is None or ctx.milestone is None:
            return self.rng.choice(exits) if exits else "wait"
        plan = self._plan(room, ctx)
        if not plan or plan[0] not in exits:
            return self.rng.choice(exits) if exits else "wait"
        if len(plan) > ctx.max_steps - ctx.step + 1:
            return self._explore(room, exits)
        return plan[0]

    def end_episode(self, trajectory: Trajectory) -> None:
        pass

    def state_dict(self) -> dict:
        return {"transitions": {k: dict(v) for k, v in self.transitions.items()},
                "start_room": self.start_room}

    def load_state_dict(self, state: dict) -> None:
        self.transitions = {k: dict(v) for k, v in state.get("transitions", {}).items()}
        self.start_room = state.get("start_room")


class MilestoneAttemptAgent(StaticRandomAgent):
    """Synthetic-MDP driver: attempts whatever milestone is active."""

    kind = "milestone_attempt"

    def act(self, observation: str, ctx: AgentContext) -> AgentOutput:
        if ctx.milestone is None:
            return AgentOutput("wait")
        return AgentOutput(f"attempt {ctx.milestone.id}")


def baseline_agent(kind: str):
    if kind == "static_random":
        return StaticRandomAgent()
    if kind == "exploit_greedy":
        return ExploitGreedyAgent()
    raise ValueError(f"unknown baseline agent {kind!r}")
