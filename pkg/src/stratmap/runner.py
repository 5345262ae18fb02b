"""Experiment orchestration: seeds, episodes, reflection, artifacts.

Run directory layout::

    config.ini              resolved configuration
    scores.csv              seed,episode,score for every episode
    metrics.json            per-seed RunReports plus the Final-K summary
    heatmap.csv             maze only, visit proportions over all seeds
    seed-<s>/episodes.jsonl step and episode records
    seed-<s>/summaries.jsonl
    seed-<s>/cycles.jsonl   one CycleReport per reflection
    seed-<s>/maps/ep-<t>.json
    seed-<s>/checkpoints/ep-<t>.json
    seed-<s>/final_map.json
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .config import ConfigError, RunConfig, config_from_text, config_to_text
from .engine import Trajectory, read_trajectories, run_episode
from .environments.agents import MazeNavigatorAgent, MilestoneAttemptAgent, baseline_agent
from .environments.maze import MazeEnv, MazeOracle, coverage_heatmap, format_heatmap
from .environments.synthetic import SyntheticEnv, SyntheticOracle, as_map
from .llm.mock import RuleBasedProposers
from .metrics import InsufficientData, RunReport, compare_policies, coverage_entropy, mean_std
from .reflection import (
    CycleReport, EpisodeSummary, ReflectionConfig, lessons_from_dicts, lessons_to_dicts,
    run_reflection_cycle, stuck_candidates, summarize_episode,
)
from .selection import RngStream
from .strategy_map import (
    IoFailure, StrategyMap, from_document, load, new_map, save, to_document,
)

logger = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    pass


class RunFault(RuntimeError):
    """A module error raised mid-run, with the seed and episode attached."""


EXPORT_KINDS = ("scores", "heatmap", "map_dot")


# -- map grouping -------------------------------------------------------------


class MapGrouping:
    """Decides which strategy map a task uses.

    ``judge(description, known)`` gets the task description and a dict of
    existing group key to description. It returns the key to share, or None
    for a new map. With no judge every task gets its own map.
    """

    def __init__(self, judge: Optional[Callable[[str, dict[str, str]], Optional[str]]] = None):
        self.judge = judge
        self.groups: dict[str, str] = {}
        self.maps: dict[str, StrategyMap] = {}

    def map_for(self, task_id: str, description: str = "") -> StrategyMap:
        key = self.judge(description, dict(self.groups)) if self.judge and self.groups else None
        if key is None or key not in self.maps:
            key = task_id
            self.groups.setdefault(key, description)
            self.maps.setdefault(key, new_map())
        return self.maps[key]


# -- building blocks ------------------------------------------------------------


@dataclass
class SeedSetup:
    env: object
    agent: object
    proposers: object
    smap: StrategyMap
    maze: object = None
    reflective: bool = True


def _live_chat():
    from .llm.client import ChatClient, EndpointConfig, LLMError

    try:
        return ChatClient(EndpointConfig.from_env())
    except LLMError as exc:
        raise ConfigError(f"live mode: {exc}") from None


def build_setup(cfg: RunConfig, chat=None) -> SeedSetup:
    """Fresh environment, agent, proposers and map for one seed."""
    if cfg.environment == "maze":
        spec = cfg.maze.build()
        env, oracle, smap = MazeEnv(spec), MazeOracle(spec), new_map()
    else:
        spec = cfg.synthetic.build()
        env, oracle = SyntheticEnv(spec), SyntheticOracle(spec)
        smap = as_map(spec) if cfg.synthetic.initial_map == "truth" else new_map()

    if cfg.agent != "apex":
        return SeedSetup(env, baseline_agent(cfg.agent), None, new_map(),
                         spec if cfg.environment == "maze" else None, reflective=False)
    if cfg.proposers == "live":
        from .llm.proposers import LLMAgent, LLMProposers

        chat = chat or _live_chat()
        model = getattr(getattr(chat, "config", None), "model", "")
        agent = LLMAgent(chat, model)
        proposers = LLMProposers(chat, model, max_fork_ops=cfg.reflection.max_fork_ops,
                                 max_new_lessons=cfg.reflection.max_new_lessons)
    else:
        agent = MazeNavigatorAgent() if cfg.environment == "maze" else MilestoneAttemptAgent()
        proposers = RuleBasedProposers(oracle)
    return SeedSetup(env, agent, proposers, smap, spec if cfg.environment == "maze" else None)


# -- file helpers ---------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _append_jsonl(path: Path, rows: Sequence[dict]) -> None:
    with path.open("a") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _latest_checkpoint(seed_dir: Path) -> Optional[Path]:
    found = sorted((seed_dir / "checkpoints").glob("ep-*.json"))
    return found[-1] if found else None


# -- the per-seed loop ------------------------------------------------------------


def _seed_report(cfg: RunConfig, seed: int, setup: SeedSetup, trajs: list[Trajectory],
                 cycles: list[dict]) -> RunReport:
    entropy, reached = 0.0, {}
    if setup.maze is not None:
        spec = setup.maze
        entropy = coverage_entropy(coverage_heatmap(trajs, spec.width, spec.height))
        visited = {tuple(s.info["cell"]) for t in trajs for s in t.steps}
        reached = {f"{c[0]},{c[1]}": c in visited for c in sorted(spec.reward_cells)}
    else:
        achieved = {a.milestone for t in trajs for a in t.attempted if a.outcome == "achieved"}
        reached = {v: v in achieved for v in sorted(setup.env.spec.true_deps)}
    calls = dict(getattr(setup.proposers, "calls", {}) or {})
    agent_calls = getattr(setup.agent, "calls", 0)
    if agent_calls:
        calls["action"] = agent_calls
    fork_nodes = sum(
        1 for c in cycles for op in c["accepted_ops"]
        if op["origin"] == "fork_discovery" and op["kind"] in ("add_child", "add_branch")
    )
    return RunReport(cfg.run_label, seed, [t.final_score for t in trajs], entropy, reached,
                     dict(sorted(calls.items())), len(setup.smap), fork_nodes)


def run_seed(cfg: RunConfig, seed: int, run_dir: Path, resume: bool = False,
             stop_after: Optional[int] = None, chat=None) -> RunReport:
    seed_dir = run_dir / f"seed-{seed}"
    (seed_dir / "maps").mkdir(parents=True, exist_ok=True)
    (seed_dir / "checkpoints").mkdir(exist_ok=True)
    ep_log, sum_log, cyc_log = (seed_dir / n for n in ("episodes.jsonl", "summaries.jsonl", "cycles.jsonl"))
    setup = build_setup(cfg, chat)
    rcfg: ReflectionConfig = cfg.reflection
    lessons: list = []
    trajs: list[Trajectory] = []
    cycles: list[dict] = []
    start = 0

    ckpt = _latest_checkpoint(seed_dir) if resume else None
    if ckpt is not None:
        state = json.loads(ckpt.read_text())
        start = state["episode"]
        setup.smap = from_document(state["map"])
        lessons = lessons_from_dicts(state["lessons"])
        setup.agent.load_state_dict(state["agent"])
        if setup.proposers is not None:
            setup.proposers.load_state_dict(state["proposers"])
        rows = [r for r in _read_jsonl(ep_log) if r["episode"] <= start]
        _write_jsonl(ep_log, rows)
        _write_jsonl(sum_log, [r for r in _read_jsonl(sum_log) if r["episode_index"] <= start])
        cycles = [r for r in _read_jsonl(cyc_log) if r["episode"] <= start]
        _write_jsonl(cyc_log, cycles)
        trajs = read_trajectories(ep_log)
        if [t.final_score for t in trajs] != state["scores"]:
            raise RunFault(f"seed {seed}: episode log disagrees with checkpoint {ckpt.name}")
        logger.info("seed %d: resuming after episode %d", seed, start)
    else:
        for p in (ep_log, sum_log, cyc_log):
            p.write_text("")

    flat = cfg.ablation.representation == "flat_list"
    window_s: list[EpisodeSummary] = []
    window_t: list[Trajectory] = []
    for t in range(start + 1, cfg.engine.episodes + 1):
        try:
            if hasattr(setup.env, "reseed"):
                setup.env.reseed(RngStream([seed, t, 1]))
            traj = run_episode(setup.smap, setup.env, setup.agent, cfg.policy, cfg.engine,
                               RngStream.for_episode(seed, t), t, lessons, ignore_deps=flat)
            trajs.append(traj)
            _append_jsonl(ep_log, traj.to_records())
            if setup.reflective:
                summary = summarize_episode(traj, setup.smap, setup.proposers)
                _append_jsonl(sum_log, [summary.to_dict()])
                window_s.append(summary)
                window_t.append(traj)
            if t % rcfg.interval_n == 0:
                if setup.reflective:
                    report, lessons = run_reflection_cycle(
                        setup.smap, window_s[-rcfg.interval_n:], window_t[-rcfg.interval_n:],
                        setup.proposers, rcfg, t, lessons,
                        propagation=cfg.ablation.propagation,
                        fork_discovery=cfg.ablation.fork_discovery == "on",
                    )
                    window_s, window_t = [], []
                    cycles.append(report.to_dict())
                    _append_jsonl(cyc_log, [report.to_dict()])
                save(setup.smap, seed_dir / "maps" / f"ep-{t:04d}.json")
                _write_json(seed_dir / "checkpoints" / f"ep-{t:04d}.json", {
                    "episode": t,
                    "map": to_document(setup.smap),
                    "lessons": lessons_to_dicts(lessons),
                    "agent": setup.agent.state_dict(),
                    "proposers": setup.proposers.state_dict() if setup.proposers else {},
                    "scores": [x.final_score for x in trajs],
                })
        except (RunFault, ConfigError):
            raise
        except Exception as exc:
            raise RunFault(f"seed {seed}, episode {t}: {type(exc).__name__}: {exc}") from exc
        if stop_after is not None and t >= stop_after:
            break

    save(setup.smap, seed_dir / "final_map.json")
    report = _seed_report(cfg, seed, setup, trajs, cycles)
    if setup.maze is not None:
        spec = setup.maze
        (seed_dir / "heatmap.csv").write_text(
            format_heatmap(coverage_heatmap(trajs, spec.width, spec.height)))
    return report


# -- the run ---------------------------------------------------------------------


@dataclass
class RunResult:
    run_dir: Path
    reports: list[RunReport]
    summary: dict = field(default_factory=dict)


def summarize_reports(reports: Sequence[RunReport], k: int) -> dict:
    k = min(k, min(len(r.scores) for r in reports))
    out = {"final_k": k, "label": reports[0].label}
    try:
        out.update(compare_policies(reports, k)[reports[0].label])
    except InsufficientData:
        out.update({"final_k_mean": reports[0].final(k), "final_k_std": None, "seeds": len(reports)})
    cum = [r.cumulative for r in reports]
    out["cumulative_mean"] = sum(cum) / len(cum)
    try:
        out["entropy_mean"], out["entropy_std"] = mean_std([r.entropy for r in reports])
    except InsufficientData:
        out["entropy_mean"], out["entropy_std"] = reports[0].entropy, None
    return out


def scores_csv(rows: Sequence[tuple[int, int, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "episode", "score"])
    for seed, ep, score in rows:
        w.writerow([seed, ep, repr(float(score))])
    return buf.getvalue()


def run(cfg: RunConfig, resume: bool = False, stop_after: Optional[int] = None, chat=None) -> RunResult:
    """Run every seed of ``cfg`` (in parallel threads) and write the artifacts."""
    run_dir = Path(cfg.output)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.ini").write_text(config_to_text(cfg))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if cfg.proposers == "live" and cfg.agent == "apex" and chat is None:
        chat = _live_chat()

    def one(seed):
        return run_seed(cfg, seed, run_dir, resume, stop_after, chat)

    workers = min(cfg.workers, len(cfg.seeds))
    if workers == 1:
        reports = [one(s) for s in cfg.seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(one, cfg.seeds))

    rows = [(r.seed, i, s) for r in sorted(reports, key=lambda r: r.seed)
            for i, s in enumerate(r.scores, 1)]
    (run_dir / "scores.csv").write_text(scores_csv(rows))
    summary = summarize_reports(reports, cfg.final_k)
    _write_json(run_dir / "metrics.json", {
        "summary": summary,
        "reports": [r.to_dict() for r in sorted(reports, key=lambda r: r.seed)],
    })
    if cfg.environment == "maze":
        (run_dir / "heatmap.csv").write_text(format_heatmap(_run_heatmap(run_dir, cfg)))
    return RunResult(run_dir, reports, summary)


def _run_heatmap(run_dir: Path, cfg: RunConfig):
    trajs = []
    for seed in cfg.seeds:
        trajs.extend(read_trajectories(run_dir / f"seed-{seed}" / "episodes.jsonl"))
    spec = cfg.maze.build()
    return coverage_heatmap(trajs, spec.width, spec.height)


# -- inspect / export / reflect -----------------------------------------------------


def inspect_map(path, rcfg: Optional[ReflectionConfig] = None) -> str:
    smap = load(path)
    rcfg = rcfg or ReflectionConfig()
    lines = [f"{'id':<28} {'n':>4} {'mean':>9} {'var':>9}  deps"]
    for v in smap.ids():
        s = smap.stats[v]
        var = "-" if s.variance is None else f"{s.variance:.3f}"
        deps = ",".join(sorted(smap.deps(v))) or "-"
        lines.append(f"{v:<28} {s.n:>4} {s.mean_reward:>9.3f} {var:>9}  {deps}")
    lines.append("")
    lines.append("edges:")
    lines.extend(f"  {a} -> {b}" for a, b in smap.edges())
    lines.append("stuck candidates:")
    stuck = stuck_candidates(smap, rcfg)
    lines.extend(f"  {v}" for v in stuck)
    if not stuck:
        lines.append("  (none)")
    return "\n".join(lines) + "\n"


def to_dot(smap: StrategyMap) -> str:
    lines = ["digraph strategy_map {"]
    for v in smap.ids():
        label = smap.milestones[v].description.replace('"', r'\"')
        lines.append(f'  "{v}" [label="{label}"];')
    lines.extend(f'  "{a}" -> "{b}";' for a, b in smap.edges())
    lines.append("}")
    return "\n".join(lines) + "\n"


def _run_config(run_dir: Path) -> RunConfig:
    path = run_dir / "config.ini"
    if not path.exists():
        raise MissingArtifact(f"{path} not found")
    return config_from_text(path.read_text())


def export(run_dir, what: str, out_dir=None) -> list[Path]:
    """Regenerate plot-ready files from a run directory's logs."""
    if what not in EXPORT_KINDS:
        raise ValueError(f"unknown export {what!r}; choose from {', '.join(EXPORT_KINDS)}")
    run_dir = Path(run_dir)
    cfg = _run_config(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "exports"
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_dirs = [run_dir / f"seed-{s}" for s in cfg.seeds]
    logs = [d / "episodes.jsonl" for d in seed_dirs]
    if what in ("scores", "heatmap"):
        missing = [str(p) for p in logs if not p.exists()]
        if missing:
            raise MissingArtifact(f"episode log(s) not found: {', '.join(missing)}")
    if what == "scores":
        rows = [(seed, t.episode_index, t.final_score)
                for seed, log in zip(cfg.seeds, logs) for t in read_trajectories(log)]
        path = out_dir / "scores.csv"
        path.write_text(scores_csv(rows))
        return [path]
    if what == "heatmap":
        if cfg.environment != "maze":
            raise MissingArtifact("heatmaps exist only for maze runs")
        path = out_dir / f"heatmap_{cfg.run_label}.csv"
        path.write_text(format_heatmap(_run_heatmap(run_dir, cfg)))
        return [path]
    paths = []
    for seed, d in zip(cfg.seeds, seed_dirs):
        src = d / "final_map.json"
        if not src.exists():
            raise MissingArtifact(f"{src} not found")
        path = out_dir / f"map_seed{seed}.dot"
        path.write_text(to_dot(load(src)))
        paths.append(path)
    return paths


def reflect(map_path, episodes_log, cfg: RunConfig, out_path=None,
            episode_t: Optional[int] = None, chat=None) -> CycleReport:
    """Run one reflection cycle on a saved map using the last N logged episodes."""
    smap = load(map_path)
    if not Path(episodes_log).exists():
        raise MissingArtifact(f"{episodes_log} not found")
    trajs = read_trajectories(episodes_log)[-cfg.reflection.interval_n:]
    if not trajs:
        raise MissingArtifact(f"{episodes_log} holds no episodes")
    setup = build_setup(cfg.with_overrides(agent="apex"), chat)
    summaries = [summarize_episode(t, smap, setup.proposers) for t in trajs]
    t = episode_t if episode_t is not None else trajs[-1].episode_index
    report, _ = run_reflection_cycle(
        smap, summaries, trajs, setup.proposers, cfg.reflection, t,
        propagation=cfg.ablation.propagation,
        fork_discovery=cfg.ablation.fork_discovery == "on",
        check_schedule=False,
    )
    save(smap, out_path or map_path)
    return report
