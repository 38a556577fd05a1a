import json
import math

import pytest

from atsnas.cli import EVALS_COLUMNS, RANKING_COLUMNS, build_context, cmd_score, cmd_search, main, read_csv
from atsnas.config import (
    DEFAULT_ALPHA,
    DEFAULT_TARGET,
    PRESETS,
    ConfigError,
    RunConfig,
    config_from_dict,
    parse_config,
    serialize,
)
from atsnas.evaluator import TrainConfig, grade
from atsnas.genome import canonical_hash, load_genome, random_genome, save_genome, suggest_block_budget, validate
from atsnas.search import SearchConfig

from conftest import make_toy_config
from test_scorer import FIXTURE_N_ACTIVATIONS, FIXTURE_SCORE


# -- configuration ---------------------------------------------------------------------

def test_minimal_config_gets_defaults():
    cfg = parse_config("seed: 4\noutput_dir: runs/x\n")
    assert cfg.seed == 4 and cfg.output_dir == "runs/x"
    assert cfg.search == SearchConfig() and cfg.train == TrainConfig()
    assert (cfg.objective.target, cfg.objective.alpha) == (DEFAULT_TARGET, DEFAULT_ALPHA)
    space = cfg.space.build()
    assert space.block_budget == suggest_block_budget(space)


def test_alpha_out_of_range_names_key():
    with pytest.raises(ConfigError) as info:
        parse_config("seed: 0\noutput_dir: o\nobjective: {alpha: 1.5}\n")
    assert info.value.path == "objective.alpha" and "1.5" in str(info.value)


@pytest.mark.parametrize("text, path", [
    ("output_dir: o\n", "seed"),
    ("seed: 0\n", "output_dir"),
    ("seed: 0\noutput_dir: o\nsearch: {patience: two}\n", "search.patience"),
    ("seed: 0\noutput_dir: o\nsearch: {patiense: 2}\n", "search.patiense"),
    ("seed: 0\noutput_dir: o\nbogus: 1\n", "bogus"),
    ("seed: 0\noutput_dir: o\nobjective: {target: 0}\n", "objective.target"),
    ("seed: 0\noutput_dir: o\nobjective: {preset: lidnas-x}\n", "objective.preset"),
    ("seed: 0\noutput_dir: o\nspace: {channels: []}\n", "space.channels"),
])
def test_config_errors_carry_key_path(text, path):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == path


def test_preset_sets_objective():
    cfg = parse_config("seed: 0\noutput_dir: o\nobjective: {preset: lidnas-k}\n")
    assert (cfg.objective.target, cfg.objective.alpha) == PRESETS["lidnas-k"]
    cfg = parse_config("seed: 0\noutput_dir: o\nobjective: {preset: lidnas-k, alpha: 0.9}\n")
    assert cfg.objective.alpha == 0.9


@pytest.mark.parametrize("text", [
    "seed: 0\noutput_dir: o\n",
    "seed: 9\noutput_dir: o\nspace: {num_scales: 2, channels: [8, 16], block_budget: null}\n"
    "objective: {preset: lidnas-s}\ntrain: {epochs: 3, learning_rate: 0.01}\n",
])
def test_config_round_trip(text):
    cfg = parse_config(text)
    again = parse_config(serialize(cfg))
    assert isinstance(again, RunConfig) and again == cfg
    assert serialize(again) == serialize(cfg)


# -- subcommands ---------------------------------------------------------------------------

def test_cmd_score_matches_scorer_fixture(tmp_path, fixture_genome):
    path = tmp_path / "g.json"
    save_genome(fixture_genome, path)
    out = cmd_score(path, config_from_dict({"seed": 0, "output_dir": str(tmp_path)}))
    assert out["hash"] == canonical_hash(fixture_genome)
    assert out["n_activations"] == FIXTURE_N_ACTIVATIONS and not out["degenerate"]
    assert abs(out["score"] - FIXTURE_SCORE) <= 1e-9 * FIXTURE_SCORE


def test_search_with_zero_iterations(tmp_path):
    cfg = make_toy_config(tmp_path / "run", search={"max_iterations": 0})
    result = cmd_search(cfg)
    run = tmp_path / "run"
    trajectories = sorted(run.glob("trajectory-*.csv"))
    assert len(trajectories) == len(result.parents) == 6
    for path in trajectories:
        lines = path.read_text().splitlines()
        assert len(lines) == 2 and lines[0].startswith("# generated ")
        assert lines[1] == "iteration,child_hash,reward,accuracy,params,grade,accepted,tabu_size"
    ranking = read_csv(run / "ranking.csv")
    assert len(ranking) == 243 and tuple(ranking[0]) == RANKING_COLUMNS
    evals = read_csv(run / "evals.csv")
    assert tuple(evals[0]) == EVALS_COLUMNS and len(evals) == 6
    for row in evals:
        expect = grade(float(row["accuracy"]), int(row["params"]), 3000, 0.6).grade
        assert float(row["grade"]) == expect
    best = load_genome(run / "best_genome.json")
    assert validate(best).ok
    summary = json.loads((run / "summary.json").read_text())
    assert summary["best_hash"] == canonical_hash(best) == result.best_eval.hash
    assert summary["best_grade"] == max(float(r["grade"]) for r in evals)
    for name in ("config.yaml", "final_ranking.csv", "mutations.jsonl", "best_params.bin", "best_params.manifest",
                 "timings.jsonl", "trajectory.png", "tradeoff.png"):
        assert (run / name).exists(), name
    assert parse_config((run / "config.yaml").read_text()) == cfg


def test_main_score_prints_json(tmp_path, fixture_genome, capsys):
    path = tmp_path / "g.json"
    save_genome(fixture_genome, path)
    assert main(["score", str(path), "--seed", "0", "--out", str(tmp_path)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert math.isclose(payload["score"], FIXTURE_SCORE, rel_tol=1e-9)


def test_main_eval_prints_grade(tmp_path, capsys):
    cfg = make_toy_config(tmp_path)
    g = random_genome(build_context(cfg).space, 0)
    save_genome(g, tmp_path / "g.json")
    assert main(["eval", str(tmp_path / "g.json"), "--toy", "--out", str(tmp_path)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload) >= {"grade", "accuracy", "params", "target", "alpha", "r", "hash"}
    assert payload["grade"] == grade(payload["accuracy"], payload["params"], 3000, 0.6).grade


def test_main_missing_genome_reports_error(tmp_path, capsys):
    code = main(["score", str(tmp_path / "absent.json")])
    assert code != 0
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["status"] == "error" and record["kind"]


def test_main_bad_config_reports_key(tmp_path, capsys):
    bad = tmp_path / "c.yaml"
    bad.write_text("seed: 0\noutput_dir: o\nobjective: {alpha: 1.5}\n")
    code = main(["search", "--config", str(bad)])
    assert code == 2
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["key"] == "objective.alpha"


def test_main_invalid_genome(tmp_path, capsys):
    (tmp_path / "g.json").write_text('{"schema_version": 1, "blocks": []}')
    assert main(["score", str(tmp_path / "g.json")]) != 0
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["status"] == "error"
