"""Run configuration read from a sectioned INI file.

Every key is optional; an empty file yields the default APEX setup
(Thompson selection, DAG propagation, fork discovery on). Sections:

``[run]``
    environment (maze | synthetic), agent (apex | static_random |
    exploit_greedy), seeds ("0-9" or "1,4,7"), output, proposers
    (mock | live), final_k, workers, label
``[policy]``
    kind, c, epsilon, sigma_prior, sigma_min
``[engine]``
    max_steps, patience_unvisited, patience_visited, episodes
``[reflection]``
    interval_n, gamma, max_fork_ops, max_new_lessons, lesson_capacity,
    freeze_episode, stuck_min_visits, stuck_max_mean, diagnosis_cooldown
``[ablation]``
    representation (dag | flat_list), propagation (dag | sequential),
    fork_discovery (on | off)
``[maze]``
    layout (default | random | custom), maze_seed, width, height,
    episode_steps, episodes; custom layouts also read walls
    ("0,0 1,0; 2,2 2,3"), rewards ("3,0=40; 4,4=80") and start ("0,0")
``[synthetic]``
    means, std, success_prob, deps, initial_map (truth | empty)

For the maze, ``engine.max_steps`` and ``engine.episodes`` fall back to the
maze's own ``episode_steps`` and ``episodes`` when not set explicitly.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .engine import EngineConfig
from .reflection import ReflectionConfig
from .selection import SelectionPolicy

ENVIRONMENTS = ("maze", "synthetic")
AGENTS = ("apex", "static_random", "exploit_greedy")
PROPOSER_MODES = ("mock", "live")
ABLATION_CHOICES = {
    "representation": ("dag", "flat_list"),
    "propagation": ("dag", "sequential"),
    "fork_discovery": ("on", "off"),
}
ABLATION_SHORTHANDS = {
    "flat_list": ("representation", "flat_list"),
    "sequential": ("propagation", "sequential"),
    "no_fd": ("fork_discovery", "off"),
}


class ConfigError(ValueError):
    pass


@dataclass
class AblationConfig:
    representation: str = "dag"
    propagation: str = "dag"
    fork_discovery: str = "on"

    def __post_init__(self):
        for name, choices in ABLATION_CHOICES.items():
            value = getattr(self, name)
            if value not in choices:
                raise ConfigError(f"ablation.{name} must be one of {', '.join(choices)}, got {value!r}")

    def tags(self) -> list[str]:
        default = AblationConfig()
        return [getattr(self, n) if n != "fork_discovery" else "no_fd"
                for n in ABLATION_CHOICES if getattr(self, n) != getattr(default, n)]


def _cell(text: str) -> tuple[int, int]:
    x, y = text.strip().split(",")
    return int(x), int(y)


@dataclass
class MazeConfig:
    layout: str = "default"
    maze_seed: int = 0
    width: int = 5
    height: int = 5
    episode_steps: int = 10
    episodes: int = 20
    walls: str = ""
    rewards: str = ""
    start: str = "0,0"

    def build(self):
        from .environments.maze import MazeSpec, default_maze, random_maze

        if self.layout == "default":
            spec = default_maze()
        elif self.layout == "random":
            spec = random_maze(self.maze_seed, self.width, self.height, self.episode_steps)
        elif self.layout == "custom":
            try:
                walls = [tuple(_cell(c) for c in pair.split()) for pair in self.walls.split(";") if pair.strip()]
                if any(len(w) != 2 for w in walls):
                    raise ValueError("each wall needs two cells")
                rewards = {}
                for item in self.rewards.split(";"):
                    if item.strip():
                        cell, value = item.split("=")
                        rewards[_cell(cell)] = (float(value), True)
                spec = MazeSpec.from_walls(self.width, self.height, walls, rewards, _cell(self.start))
            except ValueError as exc:
                raise ConfigError(f"maze: {exc}") from None
        else:
            raise ConfigError(f"maze.layout must be default, random or custom, got {self.layout!r}")
        spec.episode_steps = self.episode_steps
        spec.episodes = self.episodes
        return spec


@dataclass
class SyntheticConfig:
    means: list[float] = field(default_factory=lambda: [1.0, 3.25, 5.5, 7.75, 10.0])
    std: float = 1.0
    success_prob: float = 1.0
    deps: dict[str, list[str]] = field(default_factory=dict)
    initial_map: str = "truth"

    def build(self):
        from .environments.synthetic import SyntheticMdpSpec

        if self.initial_map not in ("truth", "empty"):
            raise ConfigError(f"synthetic.initial_map must be truth or empty, got {self.initial_map!r}")
        spec = SyntheticMdpSpec.flat(self.means, self.std, self.success_prob)
        try:
            for v, ds in self.deps.items():
                if v not in spec.true_deps:
                    raise ConfigError(f"synthetic.deps names unknown milestone {v!r}")
                spec.true_deps[v] = frozenset(ds)
            spec.__post_init__()
        except ValueError as exc:
            raise ConfigError(f"synthetic.deps: {exc}") from None
        return spec


@dataclass
class RunConfig:
    environment: str = "maze"
    agent: str = "apex"
    seeds: list[int] = field(default_factory=lambda: [0])
    output: str = "runs/default"
    proposers: str = "mock"
    final_k: int = 5
    workers: int = 4
    label: str = ""
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)
    engine: EngineConfig = field(default_factory=EngineConfig)
    reflection: ReflectionConfig = field(default_factory=ReflectionConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    maze: MazeConfig = field(default_factory=MazeConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        if self.environment not in ENVIRONMENTS:
            raise ConfigError(f"run.environment must be one of {', '.join(ENVIRONMENTS)}")
        if self.agent not in AGENTS:
            raise ConfigError(f"run.agent must be one of {', '.join(AGENTS)}")
        if self.proposers not in PROPOSER_MODES:
            raise ConfigError("run.proposers must be mock or live")
        if not self.seeds:
            raise ConfigError("run.seeds is empty")
        if min(self.seeds) < 0:
            raise ConfigError("seeds must be non-negative")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("run.seeds contains duplicates")
        if self.final_k < 1 or self.workers < 1:
            raise ConfigError("run.final_k and run.workers must be positive")

    @property
    def run_label(self) -> str:
        if self.label:
            return self.label
        if self.agent != "apex":
            return self.agent
        return "-".join([self.agent, self.policy.kind, *self.ablation.tags()])

    def with_overrides(self, **changes) -> "RunConfig":
        try:
            return dataclasses.replace(self, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


# -- parsing ----------------------------------------------------------------


def parse_seeds(text: str) -> list[int]:
    """``"0-9"``, ``"3"`` or ``"1, 4, 7"`` (ranges inclusive, may be mixed)."""
    seeds: list[int] = []
    try:
        for part in str(text).split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse seeds {text!r}") from None
    if not seeds:
        raise ConfigError(f"no seeds in {text!r}")
    return seeds


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"expected a list of numbers, got {text!r}") from None


def _parse_deps(text: str) -> dict[str, list[str]]:
    """``"arm-1: arm-0; arm-2: arm-0 arm-1"``"""
    out = {}
    for clause in text.split(";"):
        if not clause.strip():
            continue
        if ":" not in clause:
            raise ConfigError(f"synthetic.deps clause {clause!r} lacks ':'")
        v, ds = clause.split(":", 1)
        out[v.strip()] = ds.replace(",", " ").split()
    return out


def _typed(section: configparser.SectionProxy, cls, converters: dict | None = None) -> dict:
    """Read the keys of ``section`` that are fields of dataclass ``cls``."""
    converters = converters or {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in section.items():
        if key not in fields or (fields[key].default is dataclasses.MISSING and key not in converters):
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        if key in converters:
            out[key] = converters[key](raw)
            continue
        default = fields[key].default
        try:
            if isinstance(default, bool):
                out[key] = section.getboolean(key)
            elif isinstance(default, int) or (default is None and key == "diagnosis_cooldown"):
                out[key] = int(raw)
            elif isinstance(default, float):
                out[key] = float(raw)
            else:
                out[key] = raw.strip()
        except ValueError:
            raise ConfigError(f"[{section.name}] {key}: cannot parse {raw!r}") from None
    return out


_SECTIONS = ("run", "policy", "engine", "reflection", "ablation", "maze", "synthetic")


def config_from_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = sorted(set(parser.sections()) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")

    def section(name):
        if not parser.has_section(name):
            parser.add_section(name)
        return parser[name]

    try:
        run = _typed(section("run"), RunConfig, {"seeds": parse_seeds})
        maze = MazeConfig(**_typed(section("maze"), MazeConfig))
        synthetic = SyntheticConfig(**_typed(section("synthetic"), SyntheticConfig, {
            "means": _floats, "deps": _parse_deps,
        }))
        engine_keys = _typed(section("engine"), EngineConfig)
        if run.get("environment", "maze") == "maze":
            engine_keys.setdefault("max_steps", maze.episode_steps)
            engine_keys.setdefault("episodes", maze.episodes)
        return RunConfig(
            **run,
            policy=SelectionPolicy(**_typed(section("policy"), SelectionPolicy)),
            engine=EngineConfig(**engine_keys),
            reflection=ReflectionConfig(**_typed(section("reflection"), ReflectionConfig)),
            ablation=AblationConfig(**_typed(section("ablation"), AblationConfig)),
            maze=maze,
            synthetic=synthetic,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: Optional[str | Path] = None) -> RunConfig:
    if path is None:
        return config_from_text("")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_text(text)


def config_to_text(cfg: RunConfig) -> str:
    """Resolved configuration in the same INI layout; round-trips exactly."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {
        "environment": cfg.environment, "agent": cfg.agent,
        "seeds": ",".join(str(s) for s in cfg.seeds), "output": cfg.output,
        "proposers": cfg.proposers, "final_k": str(cfg.final_k),
        "workers": str(cfg.workers), "label": cfg.label,
    }
    for name in ("policy", "engine", "reflection", "ablation"):
        parser[name] = {k: repr(v) if isinstance(v, float) else str(v)
                        for k, v in dataclasses.asdict(getattr(cfg, name)).items()}
    parser["maze"] = {k: str(v) for k, v in dataclasses.asdict(cfg.maze).items()}
    syn = cfg.synthetic
    parser["synthetic"] = {
        "means": ", ".join(repr(m) for m in syn.means), "std": repr(syn.std),
        "success_prob": repr(syn.success_prob),
        "deps": "; ".join(f"{v}: {' '.join(ds)}" for v, ds in syn.deps.items()),
        "initial_map": syn.initial_map,
    }
    lines = []
    for name in parser.sections():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in parser[name].items())
        lines.append("")
    return "\n".join(lines)


def apply_ablation_flags(cfg: RunConfig, flags: list[str]) -> RunConfig:
    """Apply ``key=value`` or shorthand (flat_list, sequential, no_fd) flags."""
    changes = dataclasses.asdict(cfg.ablation)
    for flag in flags:
        if "=" in flag:
            key, value = (x.strip() for x in flag.split("=", 1))
        elif flag in ABLATION_SHORTHANDS:
            key, value = ABLATION_SHORTHANDS[flag]
        else:
            raise ConfigError(f"unknown ablation {flag!r}")
        if key not in ABLATION_CHOICES:
            raise ConfigError(f"unknown ablation switch {key!r}")
        changes[key] = value
    return cfg.with_overrides(ablation=AblationConfig(**changes))
