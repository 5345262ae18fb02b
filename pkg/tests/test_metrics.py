import math
import random

import numpy as np
import pytest

from stratmap.engine import BadK
from stratmap.metrics import InsufficientData, RunReport, compare_policies, coverage_entropy, mean_std


def test_entropy_uniform_grid():
    assert coverage_entropy(np.full((5, 5), 1 / 25)) == pytest.approx(math.log(25))


def test_entropy_single_cell_and_two_cells():
    grid = np.zeros((5, 5))
    grid[2, 2] = 1.0
    assert coverage_entropy(grid) == 0.0
    grid[0, 0] = 1.0
    assert coverage_entropy(grid) == pytest.approx(math.log(2))


def test_entropy_empty_grid():
    assert coverage_entropy(np.zeros((3, 3))) == 0.0


def test_mean_std_pair():
    mean, std = mean_std([4, 6])
    assert mean == 5 and std == pytest.approx(math.sqrt(2))


def test_mean_std_needs_two():
    with pytest.raises(InsufficientData):
        mean_std([1.0])


def reports(label, finals_by_seed):
    return [RunReport(label, s, [0.0] * 5 + [f] * 5) for s, f in finals_by_seed.items()]


def test_compare_policies_order_invariant():
    rows = reports("a", {0: 1.0, 1: 3.0, 2: 8.0}) + reports("b", {0: 2.0, 1: 2.0})
    want = compare_policies(rows)
    for seed in range(10):
        shuffled = rows[:]
        random.Random(seed).shuffle(shuffled)
        assert compare_policies(shuffled) == want
    assert want["a"]["final_k_mean"] == 4.0 and want["b"]["final_k_std"] == 0.0


def test_final_k_of_full_history_is_mean():
    r = RunReport("x", 0, [1.0, 2.0, 6.0])
    assert r.final(3) == 3.0 and r.cumulative == 9.0
    with pytest.raises(BadK):
        r.final(4)


def test_report_dict():
    d = RunReport("x", 2, [1.0], 0.5, {"3,0": True}, {"fork": 1}, 4, 1).to_dict()
    assert d == {"label": "x", "seed": 2, "scores": [1.0], "entropy": 0.5, "reached": {"3,0": True},
                 "calls": {"fork": 1}, "map_size": 4, "fork_nodes": 1}
