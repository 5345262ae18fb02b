import random
import socket

import pytest

from stratmap.strategy_map import Milestone, MilestoneStats, new_map

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def random_dag(rng: random.Random, max_nodes: int, edge_p: float = 0.35):
    """Random map over ids n0..n{k-1}; each node picks parents among earlier ones."""
    smap = new_map()
    k = rng.randint(1, max_nodes)
    ids = [f"n{i}" for i in range(k)]
    rng.shuffle(ids)  # id order must not line up with topological order
    for i, v in enumerate(ids):
        parents = {u for u in ids[:i] if rng.random() < edge_p}
        smap.milestones[v] = Milestone(v, f"task {v}", [], parents or {smap.root})
        smap.stats[v] = MilestoneStats()
    return smap


def has_cycle_dfs(smap) -> bool:
    """Independent three-colour DFS over dep edges."""
    colour = {v: 0 for v in smap.milestones}

    def visit(v):
        colour[v] = 1
        for u in smap.milestones[v].deps:
            if u not in colour:
                continue
            if colour[u] == 1 or (colour[u] == 0 and visit(u)):
                return True
        colour[v] = 2
        return False

    return any(colour[v] == 0 and visit(v) for v in list(colour))


@pytest.fixture
def no_network(monkeypatch):
    """Any attempt to open a socket fails the test."""

    def refuse(*args, **kwargs):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket, "socket", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)
    yield
