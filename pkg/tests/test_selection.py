import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_dag
from stratmap.selection import (
    DegenerateLog, RngStream, SelectionPolicy, select_next, thompson_score, thompson_sigma, ucb_score,
)
from stratmap.strategy_map import AbstractState, MilestoneStats, eligible_set, new_map, Milestone


class PinnedNormal:
    """Stands in for RngStream with fixed standard-normal draws."""

    def __init__(self, *draws, uniform=0.5):
        self.draws = list(draws)
        self.uniform = uniform

    def standard_normal(self):
        return self.draws.pop(0)

    def random(self):
        return self.uniform

    def choice(self, items):
        return sorted(items)[0]


def stats(n, mean, var=0.0):
    return MilestoneStats(n, mean, var * (n - 1) if n > 1 else 0.0)


def two_node_map(a, b):
    m = new_map()
    for v, s in (("A", a), ("B", b)):
        m.milestones[v] = Milestone(v, v, [], {"root"})
        m.stats[v] = s
    return m


def test_policy_defaults():
    p = SelectionPolicy()
    assert (p.kind, p.c, p.epsilon, p.sigma_prior, p.sigma_min) == ("thompson", 10.0, 0.1, 100.0, 1.0)


@pytest.mark.parametrize("kw", [
    {"kind": "softmax"}, {"c": 0}, {"epsilon": 1.5}, {"sigma_prior": 0.5}, {"sigma_min": 0},
])
def test_policy_validation(kw):
    with pytest.raises(ValueError):
        SelectionPolicy(**kw)


def test_thompson_zero_draw_gives_mean():
    assert thompson_score(stats(1, 5), SelectionPolicy(), PinnedNormal(0.0)) == 5


def test_thompson_single_visit_uses_prior_sigma():
    assert thompson_sigma(stats(1, 5), SelectionPolicy()) == 100
    assert thompson_score(stats(1, 5), SelectionPolicy(), PinnedNormal(0.25)) == 30


def test_thompson_posterior_sigma():
    assert thompson_score(stats(4, 10, 16), SelectionPolicy(), PinnedNormal(0.5)) == pytest.approx(11)


def test_thompson_sigma_floor():
    assert thompson_sigma(stats(4, 10, 0), SelectionPolicy()) == 1.0
    assert thompson_score(stats(4, 10, 0), SelectionPolicy(), PinnedNormal(1.0)) == 11


def test_ucb_hand_value():
    expected = 10 + 10 * math.sqrt(math.log(5) / 2)
    assert ucb_score(stats(2, 10), 5, SelectionPolicy()) == pytest.approx(expected, abs=1e-6)
    assert expected == pytest.approx(18.97, abs=5e-3)


def test_ucb_log_one_gives_mean():
    assert ucb_score(stats(1, 0), 1, SelectionPolicy()) == 0


def test_ucb_zero_total_is_degenerate():
    with pytest.raises(DegenerateLog):
        ucb_score(stats(1, 0), 0, SelectionPolicy())


@given(st.integers(1, 50), st.integers(51, 500), st.floats(-100, 100))
def test_ucb_strictly_decreasing_in_n(n, total, mean):
    p = SelectionPolicy("ucb")
    assert ucb_score(stats(n, mean), total, p) > ucb_score(stats(n + 1, mean), total, p)


def test_unvisited_selected_first():
    m = two_node_map(stats(0, 0), stats(5, 100))
    for seed in range(20):
        assert select_next(m, AbstractState(), SelectionPolicy(), RngStream(seed)) == "A"


def test_epsilon_greedy_exploit_branch():
    m = two_node_map(stats(2, 3), stats(2, 9))
    assert select_next(m, AbstractState(), SelectionPolicy("epsilon_greedy"), PinnedNormal(uniform=0.9)) == "B"


def test_epsilon_greedy_explore_branch_is_uniform():
    m = two_node_map(stats(2, 3), stats(2, 9))
    assert select_next(m, AbstractState(), SelectionPolicy("epsilon_greedy"), PinnedNormal(uniform=0.05)) == "A"


def test_empty_eligible_gives_none():
    assert select_next(new_map(), AbstractState(), SelectionPolicy(), RngStream(0)) is None


def test_argmax_ties_break_by_id():
    m = two_node_map(stats(3, 5), stats(3, 5))
    assert select_next(m, AbstractState(), SelectionPolicy("ucb"), RngStream(0)) == "A"


def test_unvisited_choice_is_uniform():
    m = new_map()
    for v in "ABCD":
        m.milestones[v] = Milestone(v, v, [], {"root"})
        m.stats[v] = MilestoneStats()
    counts = {v: 0 for v in "ABCD"}
    for seed in range(4000):
        counts[select_next(m, AbstractState(), SelectionPolicy(), RngStream(seed))] += 1
    assert all(850 < c < 1150 for c in counts.values())


def _random_visited(rng, m):
    for v in m.ids():
        if v != "root" and rng.random() < 0.6:
            for _ in range(rng.randint(1, 4)):
                m.stats[v].update(rng.uniform(-10, 10))


def test_unvisited_first_on_random_maps():
    rng = random.Random(11)
    checked = 0
    for i in range(1000):
        m = random_dag(rng, 10)
        _random_visited(rng, m)
        ids = [v for v in m.ids() if v != "root"]
        state = AbstractState({"root", *[v for v in ids if rng.random() < 0.3]})
        state.achieved = {v for v in state.achieved if m.deps(v) <= state.achieved or v == "root"}
        elig = eligible_set(m, state)
        policy = SelectionPolicy(rng.choice(["thompson", "ucb", "epsilon_greedy"]))
        choice = select_next(m, state, policy, RngStream(i))
        if not elig:
            assert choice is None
            continue
        assert choice in elig
        if any(m.stats[v].n == 0 for v in elig):
            assert m.stats[choice].n == 0
            checked += 1
    assert checked > 100


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_constant_shift_keeps_exploit_and_thompson_choice(seed, shift):
    rng = random.Random(seed)
    m = random_dag(rng, 8, edge_p=0.0)
    for v in m.ids():
        if v != "root":
            for _ in range(rng.randint(2, 4)):
                m.stats[v].update(rng.uniform(-10, 10))
    shifted = m.copy()
    for v in shifted.ids():
        shifted.stats[v].mean_reward += shift
    state = AbstractState()
    eg = SelectionPolicy("epsilon_greedy")
    assert select_next(m, state, eg, PinnedNormal(uniform=0.99)) == \
        select_next(shifted, state, eg, PinnedNormal(uniform=0.99))
    th = SelectionPolicy("thompson")
    assert select_next(m, state, th, RngStream(seed)) == select_next(shifted, state, th, RngStream(seed))


def test_same_seed_same_choice():
    rng = random.Random(3)
    m = random_dag(rng, 10, edge_p=0.0)
    _random_visited(rng, m)
    for v in m.ids():
        if m.stats[v].n == 0 and v != "root":
            m.stats[v].update(1.0)
    picks = {select_next(m, AbstractState(), SelectionPolicy(), RngStream(42)) for _ in range(5)}
    assert len(picks) == 1


def test_rng_stream_reproducible():
    a, b = RngStream.for_episode(7, 3), RngStream.for_episode(7, 3)
    assert [a.standard_normal() for _ in range(5)] == [b.standard_normal() for _ in range(5)]
    assert RngStream.for_episode(7, 3).random() != RngStream.for_episode(7, 4).random()
