import csv
import json
import socket

import numpy as np
import pytest

from stratmap import cli, runner
from stratmap.config import (
    ConfigError, RunConfig, apply_ablation_flags, config_from_text, config_to_text, load_config, parse_seeds,
)
from stratmap.engine import read_trajectories
from stratmap.environments.maze import MazeSpec, coverage_heatmap, default_maze
from stratmap.metrics import coverage_entropy
from stratmap.strategy_map import EditOp, Milestone, SchemaViolation, apply_ops, load, new_map, save, to_document


def maze_cfg(tmp_path, name="run", **kw):
    return config_from_text("[run]\nworkers = 1\n").with_overrides(output=str(tmp_path / name), **kw)


# -- config ----------------------------------------------------------------------


def test_empty_config_defaults():
    cfg = config_from_text("")
    assert (cfg.environment, cfg.agent, cfg.seeds, cfg.proposers) == ("maze", "apex", [0], "mock")
    assert cfg.policy.kind == "thompson" and cfg.reflection.gamma == 0.6
    assert (cfg.engine.max_steps, cfg.engine.episodes) == (10, 20)
    assert cfg.run_label == "apex-thompson"


def test_synthetic_keeps_engine_defaults():
    cfg = config_from_text("[run]\nenvironment = synthetic\n")
    assert (cfg.engine.max_steps, cfg.engine.episodes) == (120, 50)
    spec = cfg.synthetic.build()
    assert sorted(spec.reward_mean.values()) == [1, 3.25, 5.5, 7.75, 10]


@pytest.mark.parametrize("text", [
    "[run]\ncolour = red\n",
    "[extras]\nx = 1\n",
    "[run]\npolicy = ucb\n",
    "[policy]\nkind = softmax\n",
    "[run]\nseeds = 3,3\n",
    "[engine]\nmax_steps = many\n",
    "[ablation]\npropagation = eager\n",
    "not an ini file",
])
def test_bad_configs_raise(text):
    with pytest.raises(ConfigError):
        config_from_text(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


def test_parse_seeds():
    assert parse_seeds("0-3") == [0, 1, 2, 3] and parse_seeds("1, 4,7") == [1, 4, 7]
    with pytest.raises(ConfigError):
        parse_seeds("x")


def test_config_text_round_trip():
    cfg = config_from_text("[run]\nenvironment = synthetic\nseeds = 2-4\n[synthetic]\ndeps = arm-1: arm-0\n"
                           "[policy]\nkind = ucb\nc = 2\n")
    assert config_from_text(config_to_text(cfg)) == cfg
    assert cfg.synthetic.build().true_deps["arm-1"] == {"arm-0"}


def test_ablation_flags():
    cfg = apply_ablation_flags(RunConfig(), ["flat_list", "propagation=sequential", "no_fd"])
    assert (cfg.ablation.representation, cfg.ablation.propagation, cfg.ablation.fork_discovery) == \
        ("flat_list", "sequential", "off")
    assert cfg.run_label == "apex-thompson-flat_list-sequential-no_fd"
    with pytest.raises(ConfigError):
        apply_ablation_flags(RunConfig(), ["turbo"])


def test_custom_maze_layout():
    cfg = config_from_text(
        "[maze]\nlayout = custom\nwidth = 3\nheight = 1\nwalls = \nrewards = 2,0=5\nepisode_steps = 4\n")
    spec = cfg.maze.build()
    assert isinstance(spec, MazeSpec) and spec.distances()[(2, 0)] == 2
    assert cfg.engine.max_steps == 4


def test_default_layout_matches_builtin():
    assert config_from_text("").maze.build().passages == default_maze().passages


# -- runner ------------------------------------------------------------------------


def test_run_writes_artifacts(tmp_path):
    cfg = maze_cfg(tmp_path, seeds=[0, 1])
    result = runner.run(cfg)
    d = result.run_dir
    for name in ("config.ini", "scores.csv", "metrics.json", "heatmap.csv"):
        assert (d / name).exists()
    for s in (0, 1):
        sd = d / f"seed-{s}"
        assert sorted(p.name for p in (sd / "maps").iterdir()) == [f"ep-{t:04d}.json" for t in (5, 10, 15, 20)]
        assert len(read_trajectories(sd / "episodes.jsonl")) == 20
        assert len((sd / "cycles.jsonl").read_text().splitlines()) == 4
    metrics = json.loads((d / "metrics.json").read_text())
    assert metrics["summary"]["seeds"] == 2 and metrics["summary"]["final_k"] == 5
    assert config_from_text((d / "config.ini").read_text()) == cfg


def test_report_matches_logs(tmp_path):
    result = runner.run(maze_cfg(tmp_path))
    rep = result.reports[0]
    trajs = read_trajectories(result.run_dir / "seed-0" / "episodes.jsonl")
    assert rep.scores == [t.final_score for t in trajs]
    assert rep.entropy == pytest.approx(coverage_entropy(coverage_heatmap(trajs)))


def test_same_seed_same_artifacts(tmp_path):
    a = runner.run(maze_cfg(tmp_path, "a"))
    b = runner.run(maze_cfg(tmp_path, "b"))
    for name in ("seed-0/episodes.jsonl", "seed-0/final_map.json", "scores.csv"):
        assert (a.run_dir / name).read_bytes() == (b.run_dir / name).read_bytes()


def test_resume_reproduces_uninterrupted_run(tmp_path):
    full = runner.run(maze_cfg(tmp_path, "full"))
    cut = maze_cfg(tmp_path, "cut")
    runner.run(cut, stop_after=12)
    resumed = runner.run(cut, resume=True)
    assert resumed.reports[0].scores == full.reports[0].scores
    for name in ("seed-0/episodes.jsonl", "seed-0/cycles.jsonl", "seed-0/final_map.json"):
        assert (resumed.run_dir / name).read_bytes() == (full.run_dir / name).read_bytes()


def test_fork_off_adds_no_fork_nodes(tmp_path):
    result = runner.run(apply_ablation_flags(maze_cfg(tmp_path), ["no_fd"]))
    cycles = [json.loads(l) for l in (result.run_dir / "seed-0/cycles.jsonl").read_text().splitlines()]
    assert cycles and all("fork_discovery" in c["skipped_stages"] for c in cycles)
    assert result.reports[0].fork_nodes == 0 and len(load(result.run_dir / "seed-0/final_map.json")) == 1


def test_fork_additions_stop_at_freeze(tmp_path):
    cfg = maze_cfg(tmp_path).with_overrides(engine=config_from_text("[engine]\nmax_steps = 10\nepisodes = 40\n").engine)
    result = runner.run(cfg)
    cycles = [json.loads(l) for l in (result.run_dir / "seed-0/cycles.jsonl").read_text().splitlines()]
    late = [c for c in cycles if c["episode"] > cfg.reflection.freeze_episode]
    assert late and all(
        op["origin"] != "fork_discovery" for c in late for op in c["accepted_ops"])


def test_flat_list_runs(tmp_path):
    cfg = apply_ablation_flags(config_from_text("[run]\nenvironment = synthetic\nworkers = 1\n"
                                                "[engine]\nmax_steps = 5\nepisodes = 10\n"), ["flat_list"])
    result = runner.run(cfg.with_overrides(output=str(tmp_path / "flat")))
    assert len(result.reports[0].scores) == 10 and not (result.run_dir / "heatmap.csv").exists()


def test_baseline_run_has_no_reflection(tmp_path):
    result = runner.run(maze_cfg(tmp_path, agent="static_random"))
    assert (result.run_dir / "seed-0/cycles.jsonl").read_text() == ""
    assert result.reports[0].label == "static_random" and result.reports[0].calls == {}


def test_runtime_error_carries_seed_and_episode(tmp_path, monkeypatch):
    def broken(*a, **k):
        raise KeyError("boom")

    monkeypatch.setattr(runner, "run_episode", broken)
    with pytest.raises(runner.RunFault, match="seed 0, episode 1"):
        runner.run(maze_cfg(tmp_path))


def test_map_grouping_defaults_to_one_map_per_task():
    g = runner.MapGrouping()
    assert g.map_for("t1") is not g.map_for("t2")
    shared = runner.MapGrouping(judge=lambda desc, known: next(iter(known)))
    assert shared.map_for("t1", "x") is shared.map_for("t2", "y")


# -- export / inspect / reflect ------------------------------------------------------------


def test_export_scores_rows(tmp_path):
    result = runner.run(maze_cfg(tmp_path, seeds=[0, 1, 2], workers=3))
    (path,) = runner.export(result.run_dir, "scores")
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 3 * 20
    assert path.read_text() == (result.run_dir / "scores.csv").read_text()


def test_export_heatmap_equals_recomputed(tmp_path):
    result = runner.run(maze_cfg(tmp_path, seeds=[0, 1]))
    (path,) = runner.export(result.run_dir, "heatmap")
    trajs = [t for s in (0, 1) for t in read_trajectories(result.run_dir / f"seed-{s}/episodes.jsonl")]
    grid = np.loadtxt(path, delimiter=",")
    assert path.name == "heatmap_apex-thompson.csv"
    assert np.allclose(grid, coverage_heatmap(trajs), atol=1e-6)


def chain_map():
    m = new_map()
    apply_ops(m, [EditOp("add_child", {"milestone": Milestone("a", "first", [], {"root"})}),
                  EditOp("add_child", {"milestone": Milestone("b", "second", [], {"a"})})])
    return m


def test_dot_of_chain_has_two_edges():
    dot = runner.to_dot(chain_map())
    assert dot.count("->") == 2 and '"root" -> "a"' in dot and '"a" -> "b"' in dot


def test_export_missing_logs(tmp_path):
    with pytest.raises(runner.MissingArtifact):
        runner.export(tmp_path, "scores")
    result = runner.run(maze_cfg(tmp_path))
    (result.run_dir / "seed-0/episodes.jsonl").unlink()
    with pytest.raises(runner.MissingArtifact):
        runner.export(result.run_dir, "scores")


def test_heatmap_export_needs_maze(tmp_path):
    cfg = config_from_text("[run]\nenvironment = synthetic\nworkers = 1\n[engine]\nmax_steps = 3\nepisodes = 5\n")
    result = runner.run(cfg.with_overrides(output=str(tmp_path / "s")))
    with pytest.raises(runner.MissingArtifact):
        runner.export(result.run_dir, "heatmap")


def test_inspect_fresh_map(tmp_path):
    save(new_map(), tmp_path / "m.json")
    out = runner.inspect_map(tmp_path / "m.json")
    rows = out.split("\n\n")[0].splitlines()
    assert len(rows) == 2 and rows[1].split()[:2] == ["root", "0"]
    assert "(none)" in out


def test_inspect_lists_stuck_node(tmp_path):
    m = chain_map()
    for x in (0.0, -1.0, 0.0):
        m.stats["a"].update(x)
    save(m, tmp_path / "m.json")
    out = runner.inspect_map(tmp_path / "m.json")
    assert out.split("stuck candidates:\n")[1].split() == ["a"]
    assert "  a -> b" in out


def test_inspect_corrupt_map(tmp_path):
    doc = to_document(chain_map())
    for node in doc["nodes"]:
        if node["id"] == "b":
            node["deps"] = ["ghost"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaViolation):
        runner.inspect_map(path)


def test_reflect_on_saved_run(tmp_path):
    cfg = maze_cfg(tmp_path)
    result = runner.run(cfg)
    sd = result.run_dir / "seed-0"
    fresh = tmp_path / "fresh.json"
    save(new_map(), fresh)
    report = runner.reflect(fresh, sd / "episodes.jsonl", cfg, episode_t=5)
    assert report.stage_order[:2] == ["refinement", "propagation"]
    assert len(load(fresh)) > 1
    with pytest.raises(runner.MissingArtifact):
        runner.reflect(fresh, tmp_path / "none.jsonl", cfg)


# -- cli ------------------------------------------------------------------------------------


def test_cli_run_inspect_export(tmp_path, capsys):
    out = tmp_path / "cli"
    assert cli.main(["run", "--seed", "0-1", "--episodes", "10", "--out", str(out)]) == 0
    assert "artifacts in" in capsys.readouterr().out
    assert cli.main(["inspect", str(out / "seed-0/final_map.json")]) == 0
    assert "stuck candidates:" in capsys.readouterr().out
    assert cli.main(["export", str(out), "map_dot"]) == 0
    assert sorted(p.name for p in (out / "exports").iterdir()) == ["map_seed0.dot", "map_seed1.dot"]


def test_cli_reflect(tmp_path, capsys):
    out = tmp_path / "cli"
    cli.main(["run", "--episodes", "5", "--out", str(out)])
    capsys.readouterr()
    code = cli.main(["reflect", str(out / "seed-0/final_map.json"), str(out / "seed-0/episodes.jsonl"),
                     "--out", str(tmp_path / "next.json")])
    assert code == 0 and json.loads(capsys.readouterr().out)["episode"] == 5
    assert (tmp_path / "next.json").exists()


@pytest.mark.parametrize("argv,code", [
    (["run", "--policy", "softmax"], 2),
    (["run", "--ablation", "turbo"], 2),
    (["run", "--seed", "a-b"], 2),
    (["inspect", "/nonexistent/map.json"], 3),
])
def test_cli_exit_codes(argv, code, capsys):
    assert cli.main(argv) == code
    assert capsys.readouterr().err


def test_cli_live_without_endpoint(monkeypatch, tmp_path):
    monkeypatch.delenv("STRATMAP_LLM_BASE_URL", raising=False)
    assert cli.main(["run", "--live", "--out", str(tmp_path / "x")]) == 2


def test_offline_study_needs_no_network(tmp_path, no_network):
    result = runner.run(maze_cfg(tmp_path, seeds=[0, 1, 2], workers=3))
    assert all(len(r.scores) == 20 for r in result.reports)
    with pytest.raises(AssertionError):
        socket.create_connection(("example.com", 80))
