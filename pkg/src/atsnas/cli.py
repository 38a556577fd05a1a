"""Command-line front end: ``atsnas {search,score,eval,enumerate}``.

Run directory written by ``search``::

    config.yaml                 fully defaulted configuration snapshot
    ranking.csv                 hash, score, n_a, params, degenerate
    evals.csv                   hash, accuracy, params, grade, epochs
    timings.jsonl               training wall time per evaluated hash
    trajectory-<hash>.csv       iteration, child_hash, reward, accuracy, params,
                                grade, accepted, tabu_size (one per parent)
    final_ranking.csv           rank, hash, accuracy, params, grade
    best_genome.json            best architecture
    best_params.bin/.manifest   its trained weights
    mutations.jsonl             one mutation record per line
    summary.json                best grade, params, accuracy, wall time
    trajectory.png, tradeoff.png

Every CSV starts with a ``# generated <timestamp>`` line; apart from that
line, the CSVs of two runs with equal configuration and seed are
byte-identical, which is why wall times live in ``timings.jsonl``.  Logs go to
standard error; failures print a one-line JSON error record there and exit
nonzero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .config import ConfigError, RunConfig, config_from_dict, merge, serialize, toy_settings
from .evaluator import TrainingError, gen_task, grade
from .genome import InvalidConfigError, InvalidGenomeError, canonical_hash, load_genome, save_genome, space_size, validate
from .plotting import plot_score_vs_accuracy, plot_tradeoff, plot_trajectories
from .search import Context, SearchResult, TrajectoryRecord, brute_force, run_search
from .tensor import NumericError, ShapeError, save_params

logger = logging.getLogger("atsnas")

DEFAULT_OUT = "atsnas-run"
ENUMERATE_LIMIT = 4096

RANKING_COLUMNS = ("hash", "score", "n_a", "params", "degenerate")
EVALS_COLUMNS = ("hash", "accuracy", "params", "grade", "epochs")
FINAL_COLUMNS = ("rank", "hash", "accuracy", "params", "grade")
ENUMERATE_COLUMNS = ("hash", "score", "n_a", "params", "degenerate", "accuracy", "grade")


def _num(x) -> str:
    return repr(float(x))


def write_csv(path: Path, columns: Sequence[str], rows, stamp: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# generated {stamp}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def read_csv(path) -> list[dict]:
    """Rows of a run CSV as dicts (the timestamp line is skipped)."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


# -- configuration ------------------------------------------------------------------

def load_run_config(args) -> RunConfig:
    """Defaults < ``--toy`` < ``--config`` file < ``--seed``/``--out`` flags."""
    data: dict = {"seed": 0, "output_dir": DEFAULT_OUT}
    if args.toy:
        data = merge(data, toy_settings())
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError("--config", f"cannot read {args.config}: {err.strerror}") from None
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as err:
            raise ConfigError("<root>", f"not valid YAML: {err}") from None
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ConfigError("<root>", "expected a mapping at the top level")
            data = merge(data, loaded)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["output_dir"] = args.out
    return config_from_dict(data)


def build_context(cfg: RunConfig, input_resolution=None) -> Context:
    space = cfg.space.build()
    if input_resolution is not None:
        space = dataclasses.replace(space, input_resolution=tuple(input_resolution))
    h, w, _ = space.input_resolution
    task = gen_task(cfg.task.seed, cfg.task.samples, (h, w), cfg.task.max_spheres, cfg.task.val_fraction)
    return Context(space, cfg.objective.build(), cfg.train, task, cfg.seed, cfg.search.probe_size)


def _load_checked_genome(path):
    genome = load_genome(path)
    report = validate(genome)
    if not report.ok:
        raise InvalidGenomeError("; ".join(report.violations))
    return genome


# -- subcommands --------------------------------------------------------------------

def cmd_search(cfg: RunConfig, workers: int = 1) -> SearchResult:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(serialize(cfg), encoding="utf-8")
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    start = time.perf_counter()

    ctx = build_context(cfg)
    logger.info("search space: %d raw genomes, block budget %s", space_size(ctx.space), ctx.space.block_budget)
    result = run_search(ctx, cfg.search, cfg.seed, workers=workers)

    write_csv(out / "ranking.csv", RANKING_COLUMNS, (
        [e.hash, _num(e.score), e.n_activations, e.params, int(e.degenerate)] for e in result.ranking
    ), stamp)
    evals = sorted(ctx.evals.values(), key=lambda e: e.hash)
    write_csv(out / "evals.csv", EVALS_COLUMNS, (
        [e.hash, _num(e.accuracy), e.params, _num(e.grade), e.epochs] for e in evals
    ), stamp)
    with open(out / "timings.jsonl", "w", encoding="utf-8") as fh:
        for e in evals:
            fh.write(json.dumps({"hash": e.hash, "wall_seconds": round(e.wall_seconds, 3)}) + "\n")
    for run in result.runs:
        write_csv(out / f"trajectory-{run.parent_hash}.csv", TrajectoryRecord.CSV_COLUMNS,
                  (r.csv_row() for r in run.trajectory), stamp)
    write_csv(out / "final_ranking.csv", FINAL_COLUMNS, (
        [i + 1, e.hash, _num(e.accuracy), e.params, _num(e.grade)] for i, e in enumerate(result.final_ranking)
    ), stamp)
    with open(out / "mutations.jsonl", "w", encoding="utf-8") as fh:
        for run in result.runs:
            for m in run.mutations:
                fh.write(m.to_json() + "\n")

    save_genome(result.best, out / "best_genome.json")
    save_params(ctx.trained_params(result.best), out / "best_params")

    best = result.best_eval
    plot_trajectories(result.runs, out / "trajectory.png", cfg.objective.target)
    plot_tradeoff(result.final_ranking, out / "tradeoff.png", cfg.objective.target, best.hash)
    summary = {
        "best_hash": best.hash,
        "best_grade": best.grade,
        "best_accuracy": best.accuracy,
        "best_params": best.params,
        "target": cfg.objective.target,
        "alpha": cfg.objective.alpha,
        "parents": [p.hash for p in result.parents],
        "scored": len(ctx.scores),
        "trained": len(ctx.evals),
        "wall_seconds": round(time.perf_counter() - start, 3),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("best %s grade %.4f (accuracy %.4f, %d params) -> %s", best.hash[:12], best.grade,
                best.accuracy, best.params, out)
    return result


def cmd_score(genome_path, cfg: RunConfig) -> dict:
    genome = _load_checked_genome(genome_path)
    ctx = build_context(cfg, genome.input_resolution)
    rep = ctx.score_report(genome)
    return {
        "hash": canonical_hash(genome),
        "score": rep.score,
        "n": rep.n,
        "n_activations": rep.n_activations,
        "condition": rep.condition,
        "degenerate": rep.degenerate,
    }


def cmd_eval(genome_path, cfg: RunConfig) -> dict:
    genome = _load_checked_genome(genome_path)
    ctx = build_context(cfg, genome.input_resolution)
    ev = ctx.evaluate(genome)
    g = grade(ev.accuracy, ev.params, cfg.objective.target, cfg.objective.alpha)
    out = dataclasses.asdict(g)
    out.update(hash=ev.hash, epochs=ev.epochs, final_loss=ev.final_loss, wall_seconds=ev.wall_seconds)
    return out


def cmd_enumerate(cfg: RunConfig, workers: int = 1) -> dict:
    """Score and train every genome of a small space; writes enumerate.csv."""
    ctx = build_context(cfg)
    size = space_size(ctx.space)
    if size > ENUMERATE_LIMIT:
        raise InvalidConfigError(f"space has {size} genomes; enumerate is limited to {ENUMERATE_LIMIT}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(serialize(cfg), encoding="utf-8")
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    rows = sorted(brute_force(ctx, workers), key=lambda row: row[1].hash)
    write_csv(out / "enumerate.csv", ENUMERATE_COLUMNS, (
        [s.hash, _num(s.score), s.n_activations, s.params, int(s.degenerate), _num(e.accuracy), _num(e.grade)]
        for _, s, e in rows
    ), stamp)
    plot_score_vs_accuracy([s.score for _, s, _ in rows], [e.accuracy for _, _, e in rows],
                           out / "score_vs_accuracy.png")
    best = min(rows, key=lambda row: (-row[2].grade, row[2].hash))[2]
    summary = {"genomes": len(rows), "max_grade": best.grade, "best_hash": best.hash,
               "best_accuracy": best.accuracy, "best_params": best.params}
    (out / "enumerate.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker processes")
    common.add_argument("--toy", action="store_true", help="use the small enumerable toy space")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="atsnas", description="Assisted tabu search for compact depth networks")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("search", parents=[common], help="run the full search and write a run directory")
    p = sub.add_parser("score", parents=[common], help="training-free score of one genome")
    p.add_argument("genome", help="genome JSON file")
    p = sub.add_parser("eval", parents=[common], help="train and grade one genome")
    p.add_argument("genome", help="genome JSON file")
    sub.add_parser("enumerate", parents=[common], help="score and train every genome of a small space")
    return parser


def _error_record(err: Exception) -> str:
    record = {"status": "error", "kind": type(err).__name__, "message": str(err)}
    if isinstance(err, ConfigError):
        record["key"] = err.path
    return json.dumps(record, sort_keys=True)


def _emit(payload: dict) -> None:
    # strict JSON has no infinities; spell them as strings
    clean = {k: (repr(v) if isinstance(v, float) and not math.isfinite(v) else v) for k, v in payload.items()}
    print(json.dumps(clean, sort_keys=True))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers", "must be >= 1")
        cfg = load_run_config(args)
        if args.command == "search":
            result = cmd_search(cfg, args.workers)
            _emit({"status": "ok", "best_hash": result.best_eval.hash, "best_grade": result.best_eval.grade,
                   "output_dir": cfg.output_dir})
        elif args.command == "score":
            _emit(cmd_score(args.genome, cfg))
        elif args.command == "eval":
            _emit(cmd_eval(args.genome, cfg))
        else:
            _emit(cmd_enumerate(cfg, args.workers))
    except ConfigError as err:
        print(_error_record(err), file=sys.stderr)
        return 2
    except (InvalidGenomeError, InvalidConfigError, ShapeError, NumericError, TrainingError, OSError,
            ValueError, KeyError) as err:
        print(_error_record(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
