"""Pull the first JSON block out of model text and check it per proposer kind."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Optional

PROPOSER_KINDS = ("action", "summary", "refinement", "fork", "reward", "diagnosis", "lessons")
OP_KINDS = ("add_child", "add_branch", "update_node", "update_deps", "prune")


@dataclass
class ProposerOutputEnvelope:
    kind: str
    raw: str
    payload: Any = None
    status: str = "failed"  # "ok" | "failed"
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def extract_json(text: str) -> Optional[Any]:
    """First decodable JSON object or array embedded anywhere in ``text``."""
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch in "{[":
            try:
                value, _ = decoder.raw_decode(text, i)
            except json.JSONDecodeError:
                continue
            return value
    return None


def _str_list(value, name: str) -> list[str]:
    if not isinstance(value, list):
        raise ValueError(f"{name} must be a list")
    return [str(v) for v in value]


def _check_action(p):
    if not isinstance(p, dict):
        raise ValueError("expected an object")
    if not isinstance(p.get("action"), str) or not p["action"].strip():
        raise ValueError("missing action")
    flag = p.get("current_milestone_completed", False)
    if not isinstance(flag, bool):
        raise ValueError("current_milestone_completed must be a boolean")
    return {
        "action": p["action"].strip(),
        "current_milestone_completed": flag,
        "reasoning": str(p.get("reasoning", "")),
        "progress_analysis": str(p.get("progress_analysis", "")),
        "next_objective": str(p.get("next_objective", "")),
    }


def _check_summary(p):
    if not isinstance(p, dict):
        raise ValueError("expected an object")
    not_achieved = p.get("not_achieved", [])
    if not isinstance(not_achieved, list):
        raise ValueError("not_achieved must be a list")
    rows = []
    for row in not_achieved:
        if isinstance(row, dict):
            rows.append({"id": str(row.get("id", "")), "reason": str(row.get("reason", "")),
                         "missing": _str_list(row.get("missing", []), "missing")})
        else:
            rows.append({"id": str(row), "reason": "", "missing": []})
    return {
        "achieved": _str_list(p.get("achieved", []), "achieved"),
        "penalties": _str_list(p.get("penalties", []), "penalties"),
        "not_achieved": rows,
        "unexplored": _str_list(p.get("unexplored", []), "unexplored"),
    }


def _check_op(op) -> dict:
    if not isinstance(op, dict):
        raise ValueError("each operation must be an object")
    kind = op.get("op")
    if kind not in OP_KINDS:
        raise ValueError(f"unknown operation {kind!r}")
    if kind in ("add_child", "add_branch"):
        if not str(op.get("description", "")).strip():
            raise ValueError(f"{kind} needs a description")
        _str_list(op.get("key_actions", []), "key_actions")
        _str_list(op.get("deps", []), "deps")
    else:
        if not isinstance(op.get("target"), str):
            raise ValueError(f"{kind} needs a target id")
        if kind == "update_deps":
            _str_list(op.get("deps", []), "deps")
    return op


def _check_ops(p):
    ops = p.get("operations") if isinstance(p, dict) else p
    if not isinstance(ops, list):
        raise ValueError("expected a list of operations")
    return [_check_op(op) for op in ops]


def _check_reward(p):
    rewards = p.get("rewards") if isinstance(p, dict) else None
    if not isinstance(rewards, dict):
        raise ValueError("expected a rewards object")
    out = {}
    for k, v in rewards.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError(f"reward for {k!r} is not a number")
        out[str(k)] = float(v)
    return out


def _check_diagnosis(p):
    if not isinstance(p, dict):
        raise ValueError("expected an object")
    root = str(p.get("root_cause", "")).strip()
    nxt = str(p.get("next_action", "")).strip()
    if not root and not nxt:
        raise ValueError("diagnosis needs a root cause or next action")
    return {"root_cause": root, "next_action": nxt,
            "missing_prerequisite": str(p.get("missing_prerequisite", "") or "").strip()}


def _check_lessons(p):
    rows = p.get("lessons") if isinstance(p, dict) else p
    if not isinstance(rows, list):
        raise ValueError("expected a list of lessons")
    return [r for r in rows if isinstance(r, dict)]


_CHECKS = {
    "action": _check_action,
    "summary": _check_summary,
    "refinement": _check_ops,
    "fork": _check_ops,
    "reward": _check_reward,
    "diagnosis": _check_diagnosis,
    "lessons": _check_lessons,
}


def parse_proposer_output(kind: str, raw: str) -> ProposerOutputEnvelope:
    if kind not in _CHECKS:
        raise ValueError(f"unknown proposer kind {kind!r}")
    env = ProposerOutputEnvelope(kind, raw)
    value = extract_json(raw)
    if value is None:
        env.error = "no JSON block found"
        return env
    try:
        env.payload = _CHECKS[kind](value)
    except ValueError as exc:
        env.error = str(exc)
        return env
    env.status = "ok"
    return env
