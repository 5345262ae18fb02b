"""Model-backed proposers and action agent built on the prompt assets."""

from __future__ import annotations

import json
import logging
import string
from collections import Counter
from functools import lru_cache
from importlib import resources
from typing import Protocol, Sequence

from ..engine import AgentContext, AgentFault, AgentOutput
from ..propagation import AttributedRewards
from ..strategy_map import EditOp, Milestone, StrategyMap
from .base import ProposerFault
from .client import ChatRequest, ChatResponse
from .parsing import parse_proposer_output

logger = logging.getLogger(__name__)

TEMPLATE_NAMES = (
    "action", "summary", "refinement", "fork", "reward", "diagnosis", "lessons",
)
FORMAT_REMINDER = "Your previous reply could not be parsed: {error}. Reply with exactly one JSON object in the requested format."
PARSE_RETRIES = 2


class Chat(Protocol):
    def chat(self, request: ChatRequest) -> ChatResponse: ...


@lru_cache(maxsize=None)
def load_template(name: str) -> string.Template:
    text = resources.files("stratmap.prompts").joinpath(f"{name}.txt").read_text()
    return string.Template(text)


def template_placeholders(name: str) -> set[str]:
    t = load_template(name)
    return {m.group("named") or m.group("braced")
            for m in t.pattern.finditer(t.template) if m.group("named") or m.group("braced")}


def render(name: str, **slots) -> str:
    return load_template(name).substitute({k: str(v) for k, v in slots.items()})


def render_map(smap: StrategyMap) -> str:
    lines = []
    for v in smap.ids():
        if v == smap.root:
            continue
        m, s = smap.milestones[v], smap.stats[v]
        deps = [d for d in sorted(m.deps) if d != smap.root]
        lines.append(
            f"- {v}: {m.description} | key_actions={m.key_actions} | deps={deps}"
            f" | n={s.n} avg={s.mean_reward:.2f}"
        )
    return "\n".join(lines) or "(empty: only the start state)"


def render_trajectory(traj) -> str:
    return "\n".join(
        f"Step {s.step}: STATE: {s.observation} | ACTION: {s.action} | REWARD: {s.reward:+g}"
        for s in traj.steps
    )


def render_summaries(summaries) -> str:
    return "\n".join(json.dumps(s.to_dict(), sort_keys=True) for s in summaries) or "(none)"


class LLMProposers:
    """Proposer suite that talks to a chat endpoint (or anything with ``chat``)."""

    def __init__(self, chat: Chat, model: str = "", temperature: float = 0.0,
                 max_fork_ops: int = 6, max_new_lessons: int = 5):
        self.chat = chat
        self.model = model
        self.temperature = temperature
        self.max_fork_ops = max_fork_ops
        self.max_new_lessons = max_new_lessons
        self.calls: Counter = Counter()
        self.reward_discrepancies = 0

    def state_dict(self) -> dict:
        return {"calls": dict(self.calls), "reward_discrepancies": self.reward_discrepancies}

    def load_state_dict(self, state: dict) -> None:
        self.calls = Counter(state.get("calls", {}))
        self.reward_discrepancies = int(state.get("reward_discrepancies", 0))

    def _ask(self, kind: str, system: str, user: str):
        self.calls[kind] += 1
        messages = [{"role": "system", "content": system}, {"role": "user", "content": user}]
        error = ""
        for attempt in range(PARSE_RETRIES + 1):
            try:
                resp = self.chat.chat(ChatRequest(self.model, messages, self.temperature))
            except Exception as exc:
                raise ProposerFault(f"{kind}: {exc}") from exc
            env = parse_proposer_output(kind, resp.content)
            if env.ok:
                return env.payload
            error = env.error
            logger.info("%s output unparseable (attempt %d): %s", kind, attempt + 1, error)
            messages = messages + [
                {"role": "assistant", "content": resp.content},
                {"role": "user", "content": FORMAT_REMINDER.format(error=error)},
            ]
        raise ProposerFault(f"{kind}: {error}")

    def summarize(self, trajectory, smap):
        from ..reflection import EpisodeSummary

        p = self._ask("summary", render("summary_system"), render(
            "summary_user", final_score=trajectory.final_score, total_steps=len(trajectory.steps),
            strategy_map=render_map(smap), trajectory=render_trajectory(trajectory),
        ))
        return EpisodeSummary(trajectory.episode_index, **p)

    def _to_ops(self, smap: StrategyMap, rows, origin: str) -> list[EditOp]:
        ops, fresh = [], {}
        for row in rows:
            kind = row["op"]
            if kind in ("add_child", "add_branch"):
                nid = smap.allocate_id(str(row.get("id") or row["description"]), fresh.values())
                fresh[str(row.get("id") or nid)] = nid
                deps = {fresh.get(d, d) for d in row.get("deps", [])}
                m = Milestone(nid, str(row["description"]), [str(a) for a in row.get("key_actions", [])],
                              deps or {smap.root}, str(row.get("pitfalls", "")))
                if kind == "add_child" and not row.get("deps"):
                    kind = "add_branch"
                ops.append(EditOp(kind, {"milestone": m}, origin))
            elif kind == "update_node":
                payload = {k: row[k] for k in ("description", "key_actions", "pitfalls", "guidance") if k in row}
                ops.append(EditOp(kind, {"target": row["target"], **payload}, origin))
            elif kind == "update_deps":
                ops.append(EditOp(kind, {"target": row["target"], "deps": set(row.get("deps", []))}, origin))
            else:
                ops.append(EditOp(kind, {"target": row["target"]}, origin))
        return ops

    def refine(self, smap, summaries, trajectories):
        rows = self._ask("refinement", render("refinement_system"), render(
            "refinement_user", strategy_map=render_map(smap), episode_summaries=render_summaries(summaries),
        ))
        return self._to_ops(smap, rows, "refinement")

    def fork(self, smap, summaries, trajectories):
        rows = self._ask("fork", render("fork_system", max_fork_ops=self.max_fork_ops), render(
            "fork_user", strategy_map=render_map(smap), episode_summaries=render_summaries(summaries),
        ))
        return self._to_ops(smap, rows, "fork_discovery")

    def attribute_rewards(self, summary, trajectory, smap):
        attempted = [a.milestone for a in trajectory.attempted if a.milestone in smap]
        if not attempted:
            return AttributedRewards(trajectory.episode_index, {}, [])
        rewards = self._ask("reward", render("reward_system"), render(
            "reward_user", strategy_map=render_map(smap),
            episode_summary=json.dumps(summary.to_dict(), sort_keys=True),
            attempted=", ".join(attempted),
        ))
        recorded = trajectory.attempt_rewards()
        out = {}
        for v in attempted:
            out[v] = rewards.get(v, 0.0)
            if abs(out[v] - recorded.get(v, 0.0)) > 1e-9:
                self.reward_discrepancies += 1
                logger.info("reward for %s: model says %g, trajectory recorded %g",
                            v, out[v], recorded.get(v, 0.0))
        return AttributedRewards(trajectory.episode_index, out, attempted)

    def diagnose(self, smap, node_id):
        m, s = smap.milestones[node_id], smap.stats[node_id]
        notes = "\n".join(
            f"    episode {n.episode_index}: {n.outcome}" +
            (f", reward {n.reward:g} at step {n.step}" if n.outcome == "achieved" else f" ({n.failure_reason})")
            for n in s.attempt_notes
        ) or "    (none)"
        p = self._ask("diagnosis", render("diagnosis_system"), render(
            "diagnosis_user", node_id=node_id, description=m.description,
            key_actions=", ".join(m.key_actions), visits=s.n, avg_reward=f"{s.mean_reward:.2f}",
            attempt_notes=notes, depends_on=", ".join(sorted(m.deps)) or "-",
            downstream=", ".join(sorted(smap.successors(node_id))) or "-",
        ))
        parts = [f"Root cause: {p['root_cause']}" if p["root_cause"] else "",
                 f"Next action: {p['next_action']}" if p["next_action"] else "",
                 f"Missing prerequisite: {p['missing_prerequisite']}" if p["missing_prerequisite"] else ""]
        return " ".join(x for x in parts if x)

    def lessons(self, summaries, existing):
        existing_text = "\n".join(
            l.render() if hasattr(l, "render") else str(l) for l in existing
        ) or "(none)"
        return self._ask("lessons", render("lessons_system", max_new_lessons=self.max_new_lessons), render(
            "lessons_user", episode_summaries=render_summaries(summaries), existing_lessons=existing_text,
        ))


class LLMAgent:
    """Acts through the action prompt; raises AgentFault on unparseable output."""

    kind = "llm"

    def __init__(self, chat: Chat, model: str = "", temperature: float = 0.7):
        self.chat = chat
        self.model = model
        self.temperature = temperature
        self.calls = 0

    def begin_episode(self, episode_index, rng) -> None:
        pass

    def end_episode(self, trajectory) -> None:
        pass

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        pass

    def act(self, observation: str, ctx: AgentContext) -> AgentOutput:
        m = ctx.milestone
        lessons = "\n".join(f"- {l.render() if hasattr(l, 'render') else l}" for l in ctx.lessons) or "- (none yet)"
        user = render(
            "action_user",
            recent_steps="\n".join(
                f"Step {s.step}: State: {s.observation} Action: {s.action} Reward: {s.reward:+g}"
                for s in ctx.recent_steps) or "(none)",
            last_actions=" -> ".join(s.action for s in ctx.recent_steps) or "(none)",
            observation=observation,
            valid_actions=", ".join(ctx.valid_actions) or "(free text)",
            step=ctx.step, max_steps=ctx.max_steps, remaining=ctx.max_steps - ctx.step,
            score=f"{ctx.score:g}",
            milestone=m.description if m else "none active; explore",
            key_actions=", ".join(m.key_actions) if m else "-",
            pitfalls=(m.pitfalls or "-") if m else "-",
            guidance=(m.guidance or "-") if m else "-",
        )
        self.calls += 1
        try:
            resp = self.chat.chat(ChatRequest(
                self.model,
                [{"role": "system", "content": render("action_system", lessons=lessons)},
                 {"role": "user", "content": user}],
                self.temperature,
            ))
        except Exception as exc:
            raise AgentFault(str(exc)) from exc
        env = parse_proposer_output("action", resp.content)
        if not env.ok:
            raise AgentFault(env.error)
        return AgentOutput(env.payload["action"], env.payload["current_milestone_completed"],
                           env.payload["reasoning"])
