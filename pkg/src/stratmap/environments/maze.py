"""Text gridworld maze: rooms with names and exits, no coordinates shown."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..strategy_map import EditOp, Milestone, StrategyMap

Cell = tuple[int, int]

DIRECTIONS = {"north": (0, -1), "south": (0, 1), "east": (1, 0), "west": (-1, 0)}
OPPOSITE = {"north": "south", "south": "north", "east": "west", "west": "east"}

_ROOM_WORDS = [
    "Amber", "Birch", "Cobalt", "Dune", "Ember", "Fern", "Granite", "Hazel",
    "Ivory", "Jade", "Kelp", "Lilac", "Moss", "Nickel", "Onyx", "Pearl",
    "Quartz", "Rust", "Slate", "Teal", "Umber", "Velvet", "Willow", "Yarrow",
    "Zinc", "Ash", "Bronze", "Cedar", "Dove", "Elm", "Flint", "Garnet",
    "Heather", "Indigo", "Juniper", "Lapis", "Maple", "Nutmeg", "Olive", "Plum",
]


class InvalidAction(ValueError):
    pass


@dataclass
class MazeSpec:
    """Grid size, open passages, reward cells and the start cell.

    ``passages`` holds undirected pairs of adjacent cells that are connected;
    every other adjacent pair is walled off.
    """

    width: int = 5
    height: int = 5
    passages: frozenset[frozenset[Cell]] = frozenset()
    reward_cells: dict[Cell, tuple[float, bool]] = field(default_factory=dict)
    start_cell: Cell = (0, 0)
    episode_steps: int = 10
    episodes: int = 20

    def __post_init__(self):
        self.passages = frozenset(frozenset(p) for p in self.passages)
        if not self.in_bounds(self.start_cell):
            raise ValueError("start cell out of bounds")
        for c in self.reward_cells:
            if not self.in_bounds(c):
                raise ValueError(f"reward cell {c} out of bounds")
        for p in self.passages:
            a, b = sorted(p)
            if not (self.in_bounds(a) and self.in_bounds(b)) or abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1:
                raise ValueError(f"passage {a}-{b} does not join adjacent cells")
        if len(self.distances()) != self.width * self.height:
            raise ValueError("maze is not connected from the start cell")

    @classmethod
    def from_walls(cls, width: int, height: int, walls, reward_cells, start_cell: Cell = (0, 0),
                   episode_steps: int = 10, episodes: int = 20) -> "MazeSpec":
        """Open grid minus ``walls`` (pairs of adjacent cells)."""
        blocked = {frozenset(w) for w in walls}
        passages = set()
        for y in range(height):
            for x in range(width):
                for nb in ((x + 1, y), (x, y + 1)):
                    pair = frozenset(((x, y), nb))
                    if nb[0] < width and nb[1] < height and pair not in blocked:
                        passages.add(pair)
        return cls(width, height, frozenset(passages), dict(reward_cells), start_cell,
                   episode_steps, episodes)

    @property
    def walls(self) -> set[frozenset[Cell]]:
        out = set()
        for y in range(self.height):
            for x in range(self.width):
                for nb in ((x + 1, y), (x, y + 1)):
                    pair = frozenset(((x, y), nb))
                    if self.in_bounds(nb) and pair not in self.passages:
                        out.add(pair)
        return out

    def in_bounds(self, c: Cell) -> bool:
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    def exits(self, c: Cell) -> list[str]:
        out = []
        for d in ("north", "east", "south", "west"):
            dx, dy = DIRECTIONS[d]
            nb = (c[0] + dx, c[1] + dy)
            if frozenset((c, nb)) in self.passages:
                out.append(d)
        return out

    def neighbor(self, c: Cell, direction: str) -> Optional[Cell]:
        if direction not in DIRECTIONS or direction not in self.exits(c):
            return None
        dx, dy = DIRECTIONS[direction]
        return (c[0] + dx, c[1] + dy)

    def distances(self) -> dict[Cell, int]:
        dist = {self.start_cell: 0}
        q = deque([self.start_cell])
        while q:
            c = q.popleft()
            for d in self.exits(c):
                nb = self.neighbor(c, d)
                if nb not in dist:
                    dist[nb] = dist[c] + 1
                    q.append(nb)
        return dist

    def cells(self) -> list[Cell]:
        return [(x, y) for y in range(self.height) for x in range(self.width)]

    def room_name(self, c: Cell) -> str:
        i = c[1] * self.width + c[0]
        word = _ROOM_WORDS[i % len(_ROOM_WORDS)]
        suffix = "" if i < len(_ROOM_WORDS) else " Annex" * (i // len(_ROOM_WORDS))
        return f"{word}{suffix} Room"

    def cell_of(self, room: str) -> Optional[Cell]:
        for c in self.cells():
            if self.room_name(c) == room:
                return c
        return None


def _path(*cells: Cell) -> list[frozenset[Cell]]:
    return [frozenset((a, b)) for a, b in zip(cells, cells[1:])]


def default_maze() -> MazeSpec:
    """5x5 tree maze.

    The +40 room sits three moves east of the start along an open corridor.
    The +80 room is eight moves away down a winding south-east path, with
    side branches and dead ends along the way.
    """
    passages = (
        _path((0, 0), (1, 0), (2, 0), (3, 0), (4, 0), (4, 1), (3, 1), (2, 1))
        + _path((0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (3, 2), (3, 3), (4, 3), (4, 4))
        + _path((0, 1), (0, 2), (0, 3), (0, 4), (1, 4), (2, 4), (3, 4))
        + _path((0, 3), (1, 3), (2, 3))
        + _path((3, 2), (4, 2))
    )
    return MazeSpec(
        passages=frozenset(passages),
        reward_cells={(3, 0): (40.0, True), (4, 4): (80.0, True)},
    )


def random_maze(seed: int, width: int = 5, height: int = 5, episode_steps: int = 10) -> MazeSpec:
    """Seeded perfect maze (randomized depth-first carving).

    The larger reward goes on the farthest cell from the start, the smaller
    one on a cell three moves away.
    """
    rng = np.random.default_rng(seed)
    start = (0, 0)
    seen, stack, passages = {start}, [start], set()
    while stack:
        c = stack[-1]
        options = []
        for d in ("north", "east", "south", "west"):
            dx, dy = DIRECTIONS[d]
            nb = (c[0] + dx, c[1] + dy)
            if 0 <= nb[0] < width and 0 <= nb[1] < height and nb not in seen:
                options.append(nb)
        if not options:
            stack.pop()
            continue
        nb = options[int(rng.integers(len(options)))]
        passages.add(frozenset((c, nb)))
        seen.add(nb)
        stack.append(nb)
    probe = MazeSpec(width, height, frozenset(passages), {}, start, episode_steps)
    dist = probe.distances()
    far = max(sorted(dist), key=lambda c: dist[c])
    near = sorted((c for c in dist if dist[c] == min(3, dist[far] - 1)), key=lambda c: (c[1], c[0]))
    rewards = {far: (80.0, True)}
    if near and near[0] != far:
        rewards[near[0]] = (40.0, True)
    return MazeSpec(width, height, frozenset(passages), rewards, start, episode_steps)


@dataclass
class MazeState:
    cell: Cell
    steps: int = 0
    collected: set[Cell] = field(default_factory=set)


def normalize_direction(action: str) -> str:
    d = action.strip().lower()
    return d[3:].strip() if d.startswith("go ") else d


def describe(spec: MazeSpec, cell: Cell) -> str:
    return f"You are in the {spec.room_name(cell)}. Exits: {', '.join(spec.exits(cell))}."


def maze_step(spec: MazeSpec, state: MazeState, action: str) -> tuple[str, float, bool]:
    """Move one room. Raises :class:`InvalidAction` for a blocked direction."""
    direction = normalize_direction(action)
    nb = spec.neighbor(state.cell, direction)
    if nb is None:
        raise InvalidAction(f"cannot go {action!r} from the {spec.room_name(state.cell)}")
    state.cell = nb
    state.steps += 1
    reward = 0.0
    if nb in spec.reward_cells:
        value, once = spec.reward_cells[nb]
        if not (once and nb in state.collected):
            reward = value
            state.collected.add(nb)
    return describe(spec, nb), reward, state.steps >= spec.episode_steps


class MazeEnv:
    ground_truth = True

    def __init__(self, spec: MazeSpec):
        self.spec = spec
        self.state = MazeState(spec.start_cell)
        self._invalid = False

    def reset(self) -> str:
        self.state = MazeState(self.spec.start_cell)
        self._invalid = False
        return describe(self.spec, self.state.cell)

    def step(self, action: str) -> tuple[str, float, bool]:
        try:
            self._invalid = False
            return maze_step(self.spec, self.state, action)
        except InvalidAction as exc:
            self._invalid = True
            self.state.steps += 1
            obs = f"{exc}. " + describe(self.spec, self.state.cell)
            return obs, 0.0, self.state.steps >= self.spec.episode_steps

    def valid_actions(self) -> list[str]:
        return self.spec.exits(self.state.cell)

    def milestone_status(self, milestone: Milestone) -> Optional[str]:
        target = target_room(milestone)
        if target is not None and target == self.spec.room_name(self.state.cell):
            return "achieved"
        return None

    def step_info(self) -> dict:
        c = self.state.cell
        return {
            "cell": [c[0], c[1]],
            "room": self.spec.room_name(c),
            "exits": self.spec.exits(c),
            "invalid": self._invalid,
        }


# -- milestones ------------------------------------------------------------

_REACH_PREFIX = "Reach the "


def reach_milestone_description(room: str) -> str:
    return f"{_REACH_PREFIX}{room}"


def target_room(milestone: Milestone) -> Optional[str]:
    if milestone.description.startswith(_REACH_PREFIX):
        return milestone.description[len(_REACH_PREFIX):]
    return None


def room_node_id(room: str) -> str:
    return "reach-" + room.lower().replace(" ", "-")


def coverage_heatmap(trajectories, width: int = 5, height: int = 5) -> np.ndarray:
    """Visit proportion per cell (row = y) over all steps of all trajectories."""
    grid = np.zeros((height, width))
    for traj in trajectories:
        for s in traj.steps:
            x, y = s.info["cell"]
            grid[y, x] += 1
    total = grid.sum()
    return grid / total if total else grid


def format_heatmap(grid: np.ndarray, delimiter: str = ",") -> str:
    return "\n".join(delimiter.join(f"{v:.6f}" for v in row) for row in grid) + "\n"


# -- ground-truth oracles for reflection -----------------------------------


def _observed_moves(trajectories):
    """(from_room, direction, to_room) for every successful move."""
    moves = []
    for traj in trajectories:
        prev = traj.initial_info.get("room")
        for s in traj.steps:
            room = s.info.get("room")
            if prev is not None and room != prev and not s.info.get("invalid"):
                moves.append((prev, normalize_direction(s.action), room))
            prev = room
    return moves


def _observed_tree(start: str, moves) -> dict[str, tuple[str, str]]:
    """Breadth-first tree over observed moves: room -> (previous room, direction)."""
    adj: dict[str, list[tuple[str, str]]] = {}
    for a, d, b in moves:
        if (d, b) not in adj.setdefault(a, []):
            adj[a].append((d, b))
    parent: dict[str, tuple[str, str]] = {}
    seen = {start}
    q = deque([start])
    while q:
        a = q.popleft()
        for d, b in adj.get(a, []):
            if b not in seen:
                seen.add(b)
                parent[b] = (a, d)
                q.append(b)
    return parent


def _route(start: str, room: str, tree) -> list[tuple[str, str]]:
    """(room, direction) pairs walked from ``start`` to ``room``."""
    path = []
    while room != start:
        prev, d = tree[room]
        path.append((prev, d))
        room = prev
    return path[::-1]


class MazeOracle:
    """Rule-based stand-ins for the summary, refinement and fork proposers.

    A node "reach X" hangs off the nearest mapped room on the shortest
    observed route to X, and its key actions are the moves from there.
    Fork discovery proposes such nodes for rooms behind exits that were
    seen in the window but never entered so far in the run. Moves are
    remembered across calls (see ``state_dict``). Refinement only corrects existing nodes: it
    rewires a node when a strictly shorter route to its room shows up.
    """

    def __init__(self, spec: MazeSpec):
        self.spec = spec
        self.start_room = spec.room_name(spec.start_cell)
        self.moves: set[tuple[str, str, str]] = set()

    def observe(self, trajectories) -> dict[str, tuple[str, str]]:
        """Fold the window's moves into run-long memory; return the route tree."""
        self.moves.update(_observed_moves(trajectories))
        return _observed_tree(self.start_room, sorted(self.moves))

    def state_dict(self) -> dict:
        return {"moves": sorted(list(m) for m in self.moves)}

    def load_state_dict(self, state: dict) -> None:
        self.moves = {tuple(m) for m in state.get("moves", [])}

    def _node_for(self, smap: StrategyMap, room: str) -> Optional[str]:
        if room == self.start_room:
            return smap.root
        nid = room_node_id(room)
        return nid if nid in smap else None

    def _anchor(self, smap: StrategyMap, room: str, tree, exclude: str = "") -> tuple[str, list[str]]:
        """Deepest mapped room on the observed route to ``room`` and the moves from it."""
        pid, route = smap.root, []
        for prev, d in _route(self.start_room, room, tree):
            node = self._node_for(smap, prev)
            if node is not None and node != exclude:
                pid, route = node, []
            route.append(d)
        node = self._node_for(smap, room)
        if node is not None and node != exclude:
            pid, route = node, []
        return pid, route

    def _route_length(self, smap: StrategyMap, nid: str) -> int:
        total, v = 0, nid
        while v != smap.root:
            total += len(smap.milestones[v].key_actions)
            v = min(smap.deps(v))
        return total

    def unexplored(self, traj) -> list[str]:
        visited: list[str] = []
        exits: dict[str, list[str]] = {}
        rooms = [(traj.initial_info.get("room"), traj.initial_info.get("exits", []))]
        rooms += [(s.info.get("room"), s.info.get("exits", [])) for s in traj.steps]
        for room, ex in rooms:
            if room is not None and room not in exits:
                visited.append(room)
                exits[room] = list(ex)
        taken = {(a, d) for a, d, _ in _observed_moves([traj])}
        return [f"{room} -> {d}" for room in visited for d in exits[room] if (room, d) not in taken]

    def refinement_ops(self, smap: StrategyMap, trajectories) -> list[EditOp]:
        tree = self.observe(trajectories)
        ops: list[EditOp] = []
        for nid in smap.ids():
            room = target_room(smap.milestones[nid])
            if nid == smap.root or room not in tree:
                continue
            if len(_route(self.start_room, room, tree)) >= self._route_length(smap, nid):
                continue
            pid, route = self._anchor(smap, room, tree, exclude=nid)
            if pid in smap.descendants(nid):
                continue
            if {pid} != set(smap.deps(nid)):
                ops.append(EditOp("update_deps", {"target": nid, "deps": {pid}}, origin="refinement"))
            ops.append(EditOp("update_node", {"target": nid, "key_actions": route}, origin="refinement"))
        return ops

    def fork_ops(self, smap: StrategyMap, trajectories) -> list[EditOp]:
        tree = self.observe(trajectories)
        visited = {self.start_room, *tree}
        ops, proposed = [], set()
        for traj in trajectories:
            for entry in self.unexplored(traj):
                room, d = entry.split(" -> ")
                cell = self.spec.cell_of(room)
                nb = self.spec.neighbor(cell, d) if cell else None
                if nb is None or (room != self.start_room and room not in tree):
                    continue
                target = self.spec.room_name(nb)
                nid = room_node_id(target)
                if target in visited or nid in smap or nid in proposed:
                    continue
                proposed.add(nid)
                pid, route = self._anchor(smap, room, tree)
                ops.append(EditOp("add_child", {"milestone": Milestone(
                    nid, reach_milestone_description(target), route + [d], {pid},
                )}, origin="fork_discovery"))
        return ops
