"""Strategy map: a DAG of milestones carrying per-node bandit statistics.

The map owns its structural invariants (single root, acyclic, every node
reachable from the root, all dependency references resolved). Every
mutation goes through :func:`apply_op`, which validates before touching
anything, so a rejected op leaves the map exactly as it was.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

logger = logging.getLogger(__name__)

ROOT_ID = "root"
DOCUMENT_VERSION = 1
NOTE_BUFFER_SIZE = 5

OP_KINDS = ("add_child", "add_branch", "update_node", "update_deps", "prune")
OP_ORIGINS = ("refinement", "fork_discovery")


class MapError(Exception):
    """Base class for strategy-map errors."""


class CycleRejected(MapError):
    pass


class UnknownTarget(MapError):
    pass


class UnknownMilestone(MapError, KeyError):
    pass


class DuplicateId(MapError):
    pass


class RootMutation(MapError):
    pass


class InvalidOp(MapError):
    pass


class SchemaViolation(MapError, ValueError):
    pass


class IoFailure(MapError, OSError):
    pass


@dataclass
class AttemptNote:
    episode_index: int
    outcome: str  # "achieved" | "failed"
    reward: Optional[float] = None
    step: Optional[int] = None
    failure_reason: Optional[str] = None

    def __post_init__(self):
        if self.outcome not in ("achieved", "failed"):
            raise ValueError(f"bad attempt outcome {self.outcome!r}")
        if self.outcome == "achieved" and self.reward is None:
            raise ValueError("achieved attempt note needs a reward")
        if self.outcome == "failed" and not self.failure_reason:
            raise ValueError("failed attempt note needs a failure reason")

    def to_dict(self) -> dict:
        return {
            "episode_index": self.episode_index,
            "outcome": self.outcome,
            "reward": self.reward,
            "step": self.step,
            "failure_reason": self.failure_reason,
        }


@dataclass
class MilestoneStats:
    """Visit count, running mean and Welford sum of squared deviations."""

    n: int = 0
    mean_reward: float = 0.0
    m2: float = 0.0
    attempt_notes: list[AttemptNote] = field(default_factory=list)
    last_diagnosed_episode: Optional[int] = None

    @property
    def variance(self) -> Optional[float]:
        """Unbiased sample variance; ``None`` while fewer than two visits."""
        if self.n < 2:
            return None
        return self.m2 / (self.n - 1)

    def update(self, value: float) -> None:
        self.n += 1
        delta = value - self.mean_reward
        self.mean_reward += delta / self.n
        self.m2 += delta * (value - self.mean_reward)
        if self.m2 < 0.0:  # rounding on identical values
            self.m2 = 0.0

    def add_note(self, note: AttemptNote) -> None:
        self.attempt_notes.append(note)
        del self.attempt_notes[:-NOTE_BUFFER_SIZE]


@dataclass
class Milestone:
    id: str
    description: str = ""
    key_actions: list[str] = field(default_factory=list)
    deps: frozenset[str] = frozenset()
    pitfalls: str = ""
    guidance: str = ""

    def __post_init__(self):
        self.deps = frozenset(self.deps)
        self.key_actions = list(self.key_actions)


@dataclass
class AbstractState:
    """Milestones achieved so far this episode plus the per-episode exclusions."""

    achieved: set[str] = field(default_factory=lambda: {ROOT_ID})
    failed_or_skipped: set[str] = field(default_factory=set)


@dataclass
class EditOp:
    """A proposed map mutation.

    ``payload`` keys by kind:

    * add_child / add_branch: ``milestone`` (a :class:`Milestone`)
    * update_node: ``target`` plus any of ``description``, ``key_actions``,
      ``pitfalls``, ``guidance``
    * update_deps: ``target``, ``deps``
    * prune: ``target``
    """

    kind: str
    payload: dict[str, Any]
    origin: str = "refinement"

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise InvalidOp(f"unknown op kind {self.kind!r}")
        if self.origin not in OP_ORIGINS:
            raise InvalidOp(f"unknown op origin {self.origin!r}")

    def describe(self) -> str:
        if self.kind in ("add_child", "add_branch"):
            m = self.payload.get("milestone")
            return f"{self.kind}({getattr(m, 'id', '?')})"
        return f"{self.kind}({self.payload.get('target', '?')})"


_UPDATABLE_FIELDS = ("description", "key_actions", "pitfalls", "guidance")


class StrategyMap:
    """The milestone DAG. Edges are derived from each node's ``deps``."""

    def __init__(self, root_id: str = ROOT_ID, root_description: str = "initial state"):
        self.root = root_id
        self.milestones: dict[str, Milestone] = {
            root_id: Milestone(root_id, root_description)
        }
        self.stats: dict[str, MilestoneStats] = {root_id: MilestoneStats()}

    # -- queries -----------------------------------------------------------

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.milestones

    def __len__(self) -> int:
        return len(self.milestones)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StrategyMap):
            return NotImplemented
        return (
            self.root == other.root
            and self.milestones == other.milestones
            and self.stats == other.stats
        )

    def ids(self) -> list[str]:
        return sorted(self.milestones)

    def deps(self, node_id: str) -> frozenset[str]:
        return self.milestones[node_id].deps

    def successors(self, node_id: str) -> set[str]:
        return {v for v, m in self.milestones.items() if node_id in m.deps}

    def edges(self) -> list[tuple[str, str]]:
        return sorted((u, v) for v, m in self.milestones.items() for u in m.deps)

    def descendants(self, node_id: str) -> set[str]:
        children: dict[str, list[str]] = {}
        for v, m in self.milestones.items():
            for u in m.deps:
                children.setdefault(u, []).append(v)
        seen: set[str] = set()
        stack = [node_id]
        while stack:
            for c in children.get(stack.pop(), ()):
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        return seen

    def depth(self, node_id: str) -> int:
        """Longest dependency chain from the root."""
        order = topological_order(self)
        d = {self.root: 0}
        for v in order:
            if v != self.root:
                d[v] = 1 + max(d[u] for u in self.milestones[v].deps)
        return d[node_id]

    def allocate_id(self, slug: str, reserved: Iterable[str] = ()) -> str:
        """Turn a free-text slug into an id not yet used in the map (or ``reserved``)."""
        taken = set(self.milestones) | set(reserved)
        base = re.sub(r"[^a-z0-9]+", "-", slug.lower()).strip("-") or "milestone"
        if base not in taken:
            return base
        k = 2
        while f"{base}-{k}" in taken:
            k += 1
        return f"{base}-{k}"

    def copy(self) -> "StrategyMap":
        return from_document(to_document(self))

    # -- mutation ----------------------------------------------------------

    def apply(self, op: EditOp) -> None:
        apply_op(self, op)


def new_map(root_id: str = ROOT_ID) -> StrategyMap:
    return StrategyMap(root_id)


def _normalize_deps(smap: StrategyMap, deps: Iterable[str]) -> frozenset[str]:
    deps = frozenset(deps)
    if not deps:
        return frozenset({smap.root})
    if smap.root in deps and len(deps) > 1:
        deps = deps - {smap.root}
    return deps


def _check_deps_exist(smap: StrategyMap, deps: Iterable[str]) -> None:
    missing = sorted(d for d in deps if d not in smap.milestones)
    if missing:
        raise UnknownTarget(f"unknown dependency id(s): {', '.join(missing)}")


def _target(smap: StrategyMap, op: EditOp) -> str:
    target = op.payload.get("target")
    if target not in smap.milestones:
        raise UnknownTarget(f"{op.kind}: unknown target {target!r}")
    return target


def apply_op(smap: StrategyMap, op: EditOp) -> None:
    """Validate and apply one edit op in place.

    Raises one of the :class:`MapError` subclasses without modifying the map
    when the op is invalid.
    """
    if op.kind in ("add_child", "add_branch"):
        m = op.payload.get("milestone")
        if not isinstance(m, Milestone):
            raise InvalidOp(f"{op.kind} needs a complete milestone")
        if not m.id:
            raise InvalidOp("milestone id must be non-empty")
        if m.id in smap.milestones:
            raise DuplicateId(m.id)
        if op.kind == "add_child" and not m.deps:
            raise InvalidOp("add_child needs at least one parent")
        if m.id in m.deps:
            raise CycleRejected(f"{m.id} cannot depend on itself")
        _check_deps_exist(smap, m.deps)
        node = Milestone(
            m.id, m.description, list(m.key_actions),
            _normalize_deps(smap, m.deps), m.pitfalls, m.guidance,
        )
        smap.milestones[node.id] = node
        smap.stats[node.id] = MilestoneStats()
        return

    target = _target(smap, op)
    node = smap.milestones[target]

    if op.kind == "update_node":
        changes = {k: v for k, v in op.payload.items() if k != "target"}
        bad = sorted(set(changes) - set(_UPDATABLE_FIELDS))
        if bad:
            raise InvalidOp(f"update_node cannot change {', '.join(bad)}")
        if "key_actions" in changes:
            changes["key_actions"] = [str(a) for a in changes["key_actions"]]
        for k, v in changes.items():
            setattr(node, k, v)
        return

    if target == smap.root:
        raise RootMutation(f"{op.kind} on the root is not allowed")

    if op.kind == "update_deps":
        new_deps = frozenset(op.payload.get("deps", ()))
        if target in new_deps:
            raise CycleRejected(f"{target} cannot depend on itself")
        _check_deps_exist(smap, new_deps)
        below = smap.descendants(target)
        looped = sorted(new_deps & below)
        if looped:
            raise CycleRejected(f"{target} -> {looped[0]} would close a cycle")
        node.deps = _normalize_deps(smap, new_deps)
        return

    # prune: dependents inherit the pruned node's own deps
    for v, m in smap.milestones.items():
        if target in m.deps:
            m.deps = _normalize_deps(smap, (m.deps - {target}) | node.deps)
    del smap.milestones[target]
    del smap.stats[target]


def apply_ops(smap: StrategyMap, ops: Iterable[EditOp]) -> tuple[list[EditOp], list[tuple[EditOp, str]]]:
    """Apply ops one by one; rejected ones are logged and skipped."""
    accepted, rejected = [], []
    for op in ops:
        try:
            apply_op(smap, op)
        except MapError as exc:
            logger.info("rejected %s: %s: %s", op.describe(), type(exc).__name__, exc)
            rejected.append((op, f"{type(exc).__name__}: {exc}"))
        else:
            accepted.append(op)
    return accepted, rejected


def eligible_set(
    smap: StrategyMap, state: AbstractState, ignore_deps: bool = False
) -> set[str]:
    """Milestones not yet achieved whose prerequisites are all achieved.

    With ``ignore_deps`` every non-root node is treated as depending on the
    root alone (the flat-list view).
    """
    unknown = sorted(a for a in state.achieved if a not in smap.milestones)
    if unknown:
        raise UnknownMilestone(f"unknown achieved id(s): {', '.join(unknown)}")
    out = set()
    for v, m in smap.milestones.items():
        if v == smap.root or v in state.achieved or v in state.failed_or_skipped:
            continue
        if ignore_deps or m.deps <= state.achieved:
            out.add(v)
    return out


def topological_order(smap: StrategyMap) -> list[str]:
    """Kahn's algorithm with lexicographic tie-breaking."""
    import heapq

    indeg = {v: len(m.deps) for v, m in smap.milestones.items()}
    children: dict[str, list[str]] = {v: [] for v in smap.milestones}
    for v, m in smap.milestones.items():
        for u in m.deps:
            children[u].append(v)
    heap = [v for v, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        u = heapq.heappop(heap)
        order.append(u)
        for v in children[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    if len(order) != len(smap.milestones):
        raise CycleRejected("map contains a cycle")
    return order


# -- validation & persistence ---------------------------------------------


def validate(smap: StrategyMap) -> None:
    """Raise :class:`SchemaViolation` if any structural invariant fails."""
    if smap.root not in smap.milestones:
        raise SchemaViolation(f"root {smap.root!r} is not a node")
    if smap.milestones[smap.root].deps:
        raise SchemaViolation("root must have no dependencies")
    if set(smap.milestones) != set(smap.stats):
        raise SchemaViolation("every node needs exactly one stats record")
    for v, m in smap.milestones.items():
        if not v or m.id != v:
            raise SchemaViolation(f"bad node id {v!r}")
        if v != smap.root and not m.deps:
            raise SchemaViolation(f"{v}: non-root node without dependencies")
        if v in m.deps:
            raise SchemaViolation(f"{v}: self-edge")
        for u in m.deps:
            if u not in smap.milestones:
                raise SchemaViolation(f"{v}: dangling dependency {u!r}")
        s = smap.stats[v]
        if s.n < 0 or s.m2 < 0 or not math.isfinite(s.mean_reward):
            raise SchemaViolation(f"{v}: invalid statistics")
        if len(s.attempt_notes) > NOTE_BUFFER_SIZE:
            raise SchemaViolation(f"{v}: more than {NOTE_BUFFER_SIZE} attempt notes")
    try:
        topological_order(smap)
    except CycleRejected as exc:
        raise SchemaViolation(str(exc)) from None
    reach = smap.descendants(smap.root) | {smap.root}
    stray = sorted(set(smap.milestones) - reach)
    if stray:
        raise SchemaViolation(f"unreachable from root: {', '.join(stray)}")


_NODE_FIELDS = {
    "id", "description", "key_actions", "deps", "pitfalls", "guidance",
    "stats", "attempt_notes", "last_diagnosed_episode",
}
_TOP_FIELDS = {"version", "root", "nodes"}
_STATS_FIELDS = {"n", "mean_reward", "m2"}
_NOTE_FIELDS = {"episode_index", "outcome", "reward", "step", "failure_reason"}


def to_document(smap: StrategyMap) -> dict:
    nodes = []
    for v in topological_order(smap):
        m, s = smap.milestones[v], smap.stats[v]
        nodes.append({
            "id": m.id,
            "description": m.description,
            "key_actions": list(m.key_actions),
            "deps": sorted(m.deps),
            "pitfalls": m.pitfalls,
            "guidance": m.guidance,
            "stats": {"n": s.n, "mean_reward": s.mean_reward, "m2": s.m2},
            "attempt_notes": [n.to_dict() for n in s.attempt_notes],
            "last_diagnosed_episode": s.last_diagnosed_episode,
        })
    return {"version": DOCUMENT_VERSION, "root": smap.root, "nodes": nodes}


def _check_fields(obj: Any, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaViolation(f"{where}: expected an object")
    extra = sorted(set(obj) - allowed)
    if extra:
        raise SchemaViolation(f"{where}: unknown field(s) {', '.join(extra)}")
    missing = sorted(allowed - set(obj))
    if missing:
        raise SchemaViolation(f"{where}: missing field(s) {', '.join(missing)}")


def from_document(doc: Any) -> StrategyMap:
    _check_fields(doc, _TOP_FIELDS, "document")
    if doc["version"] != DOCUMENT_VERSION:
        raise SchemaViolation(f"unsupported version {doc['version']!r}")
    if not isinstance(doc["nodes"], list):
        raise SchemaViolation("nodes must be a list")
    smap = StrategyMap.__new__(StrategyMap)
    smap.root = doc["root"]
    smap.milestones, smap.stats = {}, {}
    for i, nd in enumerate(doc["nodes"]):
        where = f"nodes[{i}]"
        _check_fields(nd, _NODE_FIELDS, where)
        _check_fields(nd["stats"], _STATS_FIELDS, where + ".stats")
        nid = nd["id"]
        if not isinstance(nid, str) or not nid:
            raise SchemaViolation(f"{where}: id must be a non-empty string")
        if nid in smap.milestones:
            raise SchemaViolation(f"{where}: duplicate id {nid!r}")
        if len(set(nd["deps"])) != len(nd["deps"]):
            raise SchemaViolation(f"{where}: duplicate dependency edge")
        try:
            notes = []
            for j, note in enumerate(nd["attempt_notes"]):
                _check_fields(note, _NOTE_FIELDS, f"{where}.attempt_notes[{j}]")
                notes.append(AttemptNote(**note))
            smap.milestones[nid] = Milestone(
                nid, str(nd["description"]), [str(a) for a in nd["key_actions"]],
                frozenset(nd["deps"]), str(nd["pitfalls"]), str(nd["guidance"]),
            )
            st = nd["stats"]
            smap.stats[nid] = MilestoneStats(
                int(st["n"]), float(st["mean_reward"]), float(st["m2"]),
                notes, nd["last_diagnosed_episode"],
            )
        except (TypeError, ValueError) as exc:
            raise SchemaViolation(f"{where}: {exc}") from None
    validate(smap)
    return smap


def dumps(smap: StrategyMap) -> str:
    return json.dumps(to_document(smap), indent=2, sort_keys=True)


def loads(text: str) -> StrategyMap:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return from_document(doc)


def save(smap: StrategyMap, destination) -> None:
    try:
        Path(destination).write_text(dumps(smap) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load(source) -> StrategyMap:
    try:
        text = Path(source).read_text()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return loads(text)
