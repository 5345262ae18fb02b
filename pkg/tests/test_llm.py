import json

import httpx
import pytest

from stratmap.engine import AgentContext, AgentFault, AttemptRecord, StepRecord, Trajectory
from stratmap.environments.maze import MazeOracle, default_maze
from stratmap.llm.base import ProposerFault
from stratmap.llm.client import (
    ChatClient, ChatRequest, EndpointConfig, LLMError, MalformedResponse, NetworkFailure, RateLimited,
)
from stratmap.llm.mock import RuleBasedProposers, ScriptedChat, ScriptExhausted
from stratmap.llm.parsing import extract_json, parse_proposer_output
from stratmap.llm.proposers import (
    TEMPLATE_NAMES, LLMAgent, LLMProposers, load_template, render_map, template_placeholders,
)
from stratmap.reflection import EpisodeSummary
from stratmap.strategy_map import Milestone, MilestoneStats, new_map

OK_BODY = {"choices": [{"message": {"content": '{"action": "go east"}'}, "finish_reason": "stop"}],
           "usage": {"prompt_tokens": 12, "completion_tokens": 3}}


def client(handler, **kw):
    sleeps = []
    cfg = EndpointConfig("http://llm.test/v1", api_key="sk-test", model="m", **kw)
    return ChatClient(cfg, httpx.MockTransport(handler), sleep=sleeps.append), sleeps


def req():
    return ChatRequest("", [{"role": "user", "content": "hi"}])


def test_canned_response_and_headers():
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json=OK_BODY)

    c, _ = client(handler)
    out = c.chat(req())
    assert out.content == '{"action": "go east"}' and out.finish_reason == "stop"
    assert seen[0].url == "http://llm.test/v1/chat/completions"
    assert seen[0].headers["authorization"] == "Bearer sk-test"
    assert json.loads(seen[0].content)["model"] == "m"
    assert c.usage == {"prompt_tokens": 12, "completion_tokens": 3} and c.calls == 1


def test_rate_limit_then_success():
    replies = [httpx.Response(429), httpx.Response(200, json=OK_BODY)]
    c, sleeps = client(lambda r: replies.pop(0))
    assert c.chat(req()).content
    assert [a["status"] for a in c.attempts] == [429, 200] and sleeps == [1.0]


def test_backoff_exhaustion_raises_last_error():
    c, sleeps = client(lambda r: httpx.Response(429), max_attempts=3)
    with pytest.raises(RateLimited):
        c.chat(req())
    assert sleeps == [1.0, 2.0]


def test_transport_error_is_network_failure():
    def boom(request):
        raise httpx.ConnectError("refused")

    c, _ = client(boom, max_attempts=2)
    with pytest.raises(NetworkFailure):
        c.chat(req())


def test_client_error_not_retried():
    c, _ = client(lambda r: httpx.Response(401, text="nope"))
    with pytest.raises(NetworkFailure, match="401"):
        c.chat(req())
    assert len(c.attempts) == 1


@pytest.mark.parametrize("body", [{}, {"choices": []}, {"choices": [{"message": {"content": 5}}]}])
def test_malformed_bodies(body):
    c, _ = client(lambda r: httpx.Response(200, json=body))
    with pytest.raises(MalformedResponse):
        c.chat(req())


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("m", [])
    with pytest.raises(ValueError):
        ChatRequest("m", [{"role": "tool", "content": "x"}])


def test_endpoint_from_env(monkeypatch):
    monkeypatch.delenv("STRATMAP_LLM_BASE_URL", raising=False)
    with pytest.raises(LLMError):
        EndpointConfig.from_env()
    monkeypatch.setenv("STRATMAP_LLM_BASE_URL", "http://x")
    monkeypatch.setenv("STRATMAP_LLM_MODEL", "tiny")
    assert EndpointConfig.from_env().model == "tiny"


def test_verbose_log_masks_key(caplog):
    c, _ = client(lambda r: httpx.Response(200, json=OK_BODY), verbose=True)
    with caplog.at_level("INFO"):
        c.chat(req())
    assert "sk-test" not in caplog.text and "Bearer ***" in caplog.text


# -- parsing ---------------------------------------------------------------------


def test_action_with_completion_flag():
    env = parse_proposer_output("action", 'Sure. {"action": "take key", "current_milestone_completed": true}')
    assert env.ok and env.payload["action"] == "take key" and env.payload["current_milestone_completed"]


def test_seven_fork_ops_all_parsed():
    ops = [{"op": "add_branch", "description": f"try {i}", "key_actions": [], "deps": []} for i in range(7)]
    env = parse_proposer_output("fork", "```json\n" + json.dumps({"operations": ops}) + "\n```")
    assert env.ok and len(env.payload) == 7


def test_prose_only_fails():
    env = parse_proposer_output("summary", "I think the episode went well overall.")
    assert not env.ok and env.error == "no JSON block found"


@pytest.mark.parametrize("kind,raw", [
    ("action", '{"action": ""}'),
    ("action", '{"action": "x", "current_milestone_completed": "yes"}'),
    ("refinement", '{"operations": [{"op": "teleport"}]}'),
    ("refinement", '{"operations": [{"op": "prune"}]}'),
    ("reward", '{"rewards": {"a": "lots"}}'),
    ("diagnosis", '{"root_cause": ""}'),
])
def test_shape_errors(kind, raw):
    assert not parse_proposer_output(kind, raw).ok


def test_extract_json_skips_broken_braces():
    assert extract_json("{oops} then [1, 2]") == [1, 2]
    with pytest.raises(ValueError):
        parse_proposer_output("poetry", "{}")


# -- templates --------------------------------------------------------------------------


def test_templates_load_with_expected_slots():
    for name in TEMPLATE_NAMES:
        for part in ("system", "user"):
            assert load_template(f"{name}_{part}").template.strip()
    assert {"strategy_map", "episode_summaries"} <= template_placeholders("refinement_user")
    assert "max_fork_ops" in template_placeholders("fork_system")
    assert {"observation", "valid_actions", "milestone"} <= template_placeholders("action_user")


def test_render_map_lists_nodes():
    m = new_map()
    m.milestones["a"] = Milestone("a", "open door", ["push"], {"root"})
    m.stats["a"] = MilestoneStats(2, 1.5, 0.0)
    assert render_map(m) == "- a: open door | key_actions=['push'] | deps=[] | n=2 avg=1.50"
    assert render_map(new_map()).startswith("(empty")


# -- model-backed proposers --------------------------------------------------------------


def traj_with(attempts):
    t = Trajectory(3)
    t.steps = [StepRecord(1, "o", "x", sum(r for _, r in attempts))]
    t.attempted = [AttemptRecord(v, "achieved", r, 1, 1, 1) for v, r in attempts]
    t.final_score = sum(r for _, r in attempts)
    return t


def one_node_map():
    m = new_map()
    m.milestones["a"] = Milestone("a", "do a", [], {"root"})
    m.stats["a"] = MilestoneStats()
    return m


def test_parse_retry_sends_format_reminder():
    chat = ScriptedChat(["not json", '{"achieved": ["a"]}'])
    s = LLMProposers(chat).summarize(traj_with([("a", 1.0)]), one_node_map())
    assert s.achieved == ["a"] and len(chat.requests) == 2
    assert "could not be parsed" in chat.requests[1].messages[-1]["content"]


def test_three_bad_replies_raise():
    chat = ScriptedChat(["x", "y", "z"])
    with pytest.raises(ProposerFault):
        LLMProposers(chat).diagnose(one_node_map(), "a")
    assert len(chat.requests) == 3


def test_script_exhaustion_is_proposer_fault():
    with pytest.raises(ProposerFault):
        LLMProposers(ScriptedChat([])).lessons([], [])
    with pytest.raises(ScriptExhausted):
        ScriptedChat([]).chat(req())


def test_fork_rows_become_ops_with_fresh_ids():
    rows = [{"op": "add_branch", "id": "a", "description": "again", "key_actions": ["k"], "deps": []},
            {"op": "add_child", "id": "b", "description": "after", "deps": ["a"]}]
    ops = LLMProposers(ScriptedChat([json.dumps(rows)])).fork(one_node_map(), [], [])
    first, second = (op.payload["milestone"] for op in ops)
    assert first.id == "a-2" and second.deps == {"a-2"}
    assert [op.origin for op in ops] == ["fork_discovery"] * 2


def test_refine_update_ops():
    rows = [{"op": "update_node", "target": "a", "pitfalls": "slow"},
            {"op": "update_deps", "target": "a", "deps": ["root"]}, {"op": "prune", "target": "a"}]
    ops = LLMProposers(ScriptedChat([json.dumps(rows)])).refine(one_node_map(), [], [])
    assert [(o.kind, o.payload) for o in ops] == [
        ("update_node", {"target": "a", "pitfalls": "slow"}),
        ("update_deps", {"target": "a", "deps": {"root"}}),
        ("prune", {"target": "a"}),
    ]


def test_reward_discrepancy_counted():
    p = LLMProposers(ScriptedChat(['{"rewards": {"a": 9}}']))
    out = p.attribute_rewards(EpisodeSummary(3), traj_with([("a", 4.0)]), one_node_map())
    assert out.rewards == {"a": 9.0} and p.reward_discrepancies == 1
    q = LLMProposers(ScriptedChat([]))
    assert q.attribute_rewards(EpisodeSummary(3), traj_with([]), one_node_map()).rewards == {}


def test_llm_agent_output_and_fault():
    ctx = AgentContext(None, [], [], [], 1, 10, 0.0, ["east"])
    agent = LLMAgent(ScriptedChat(['{"action": "east", "reasoning": "open"}', "???"]))
    out = agent.act("You are in the Amber Room.", ctx)
    assert out.action == "east" and not out.completed
    with pytest.raises(AgentFault):
        agent.act("again", ctx)


# -- rule-based proposers ---------------------------------------------------------------------


def test_rule_based_rewards_sum_recorded_attempts():
    p = RuleBasedProposers(MazeOracle(default_maze()))
    t = traj_with([("a", 2.0), ("b", -1.0)])
    t.attempted.append(AttemptRecord("a", "failed", 0.5, 2, 2, 1, "x"))
    assert p.attribute_rewards(None, t, None).rewards == {"a": 2.5, "b": -1.0}


def test_rule_based_state_round_trip():
    p = RuleBasedProposers(MazeOracle(default_maze()))
    p.fork(new_map(), [], [Trajectory(1)])
    q = RuleBasedProposers(MazeOracle(default_maze()))
    q.load_state_dict(p.state_dict())
    assert q.calls == p.calls == {"fork": 1}


def test_rule_based_lessons():
    s = EpisodeSummary(1, achieved=["a"], penalties=["step 4: walk into wall"],
                       not_achieved=[{"id": "b", "reason": "", "missing": ["a"]}])
    out = RuleBasedProposers(None).lessons([s], [])
    assert [l["text"] for l in out] == ["Avoid walk into wall", "b needs a first", "a can be completed"]
