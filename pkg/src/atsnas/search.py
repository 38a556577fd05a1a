"""Assisted tabu search over the backbone space.

Pipeline: seed a population of unique random genomes, rank it by the
training-free score, pick six parents (three best-scored, three best-scored
among those closest to the size target), then improve each parent with
tabu search.  Every step mutates several children, ranks them with the
cheap mutation reward and trains only the best one.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import warnings
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Optional

import numpy as np

from .evaluator import EvalResult, SyntheticTask, TrainConfig, evaluate_genome, reward
from .genome import (
    ArchitectureGenome,
    SearchSpaceConfig,
    canonical_hash,
    enumerate_genomes,
    param_count,
    random_genome,
    space_size,
)
from .mutation import MutationRecord, SearchSpaceWarning, propose_children
from .scorer import ScoreReport, score
from .tensor import compile_genome, init_params

logger = logging.getLogger(__name__)

PARENTS_PER_GROUP = 3
CLOSENESS_PERCENTILE = 5.0


def derive_seed(master: int, stream: str, key: str = "") -> int:
    """Stable 63-bit seed for ``(master, stream, key)``; independent of
    process, platform and evaluation order."""
    digest = hashlib.sha256(f"{int(master)}|{stream}|{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class Objective:
    target: int
    alpha: float


@dataclass(frozen=True)
class SearchConfig:
    population: int = 200
    children: int = 8
    max_iterations: int = 100
    patience: int = 10
    tabu_tenure: int = 20
    probe_size: int = 32


@dataclass(frozen=True)
class RankingEntry:
    hash: str
    score: float
    params: int
    degenerate: bool
    n_activations: int
    genome: ArchitectureGenome = field(repr=False, compare=False)

    def sort_key(self):
        return (self.degenerate, -self.score if not self.degenerate else 0.0, self.hash)


class Context:
    """Everything needed to score and train candidates, with memo caches.

    Scores and evaluations are pure functions of ``(seed, genome)``, so
    caching never changes results, only cost.
    """

    def __init__(self, space: SearchSpaceConfig, objective: Objective, train_config: TrainConfig,
                 task: SyntheticTask, seed: int, probe_size: int = 32):
        h, w, c = space.input_resolution
        if tuple(task.resolution) != (h, w):
            raise ValueError(f"task resolution {task.resolution} differs from space input {(h, w)}")
        self.space = space
        self.objective = objective
        self.train_config = train_config
        self.task = task
        self.seed = int(seed)
        self.input_shape = (c, h, w)
        self.probe = np.random.default_rng(derive_seed(seed, "probe")).standard_normal((probe_size, c, h, w))
        self.scores: dict[str, RankingEntry] = {}
        self.evals: dict[str, EvalResult] = {}

    def init_seed(self, h: str) -> int:
        return derive_seed(self.seed, "init", h)

    def score_report(self, genome: ArchitectureGenome) -> ScoreReport:
        """Score of ``genome`` at its hash-derived initialisation on the
        shared probe batch."""
        net = compile_genome(genome, self.input_shape, self.space.expansion)
        return score(net, init_params(net, self.init_seed(canonical_hash(genome))), self.probe)

    def score(self, genome: ArchitectureGenome) -> RankingEntry:
        h = canonical_hash(genome)
        hit = self.scores.get(h)
        if hit is None:
            rep = self.score_report(genome)
            hit = RankingEntry(h, rep.score, param_count(genome, self.space.expansion), rep.degenerate,
                               rep.n_activations, genome)
            self.scores[h] = hit
        return hit

    def _train(self, genome: ArchitectureGenome, h: str) -> tuple[EvalResult, dict]:
        return evaluate_genome(
            genome, self.task, self.train_config, derive_seed(self.seed, "train", h),
            self.objective.target, self.objective.alpha, init_seed=self.init_seed(h),
            expansion=self.space.expansion,
        )

    def evaluate(self, genome: ArchitectureGenome) -> EvalResult:
        h = canonical_hash(genome)
        hit = self.evals.get(h)
        if hit is None:
            hit, _ = self._train(genome, h)
            self.evals[h] = hit
        return hit

    def trained_params(self, genome: ArchitectureGenome) -> dict:
        """Retrain ``genome`` (deterministically) and return its weights."""
        return self._train(genome, canonical_hash(genome))[1]


# -- population and ranking ---------------------------------------------------------

def seed_population(config: SearchSpaceConfig, seed: int, count: int,
                    retry_cap: int = 1000) -> list[ArchitectureGenome]:
    """``count`` distinct random genomes.

    When the raw space is no larger than ``count`` the whole (valid) space is
    enumerated instead.  Rejection sampling stops after ``retry_cap``
    consecutive duplicate draws.  A ``SearchSpaceWarning`` is issued when
    fewer than ``count`` genomes are returned.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if space_size(config) <= count:
        genomes = list(enumerate_genomes(config))
    else:
        rng = np.random.default_rng(seed)
        seen: set[str] = set()
        genomes = []
        misses = 0
        while len(genomes) < count and misses < retry_cap:
            g = random_genome(config, rng)
            h = canonical_hash(g)
            if h in seen:
                misses += 1
                continue
            misses = 0
            seen.add(h)
            genomes.append(g)
    if len(genomes) < count:
        warnings.warn(f"search space yielded only {len(genomes)} of {count} genomes", SearchSpaceWarning,
                      stacklevel=2)
    return genomes


def _score_chunk(ctx: Context, genomes: list[ArchitectureGenome]) -> list[RankingEntry]:
    return [ctx.score(g) for g in genomes]


def _chunks(items: list, n: int) -> list[list]:
    size = max(1, math.ceil(len(items) / n))
    return [items[i:i + size] for i in range(0, len(items), size)]


def rank_initial(population: list[ArchitectureGenome], ctx: Context, workers: int = 1) -> list[RankingEntry]:
    """Score every genome at initialisation and sort by
    ``(degenerate, score descending, hash)``."""
    if not population:
        raise ValueError("population must not be empty")
    todo = [g for g in population if canonical_hash(g) not in ctx.scores]
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk in pool.map(partial(_score_chunk, ctx), _chunks(todo, workers)):
                for entry in chunk:
                    ctx.scores.setdefault(entry.hash, entry)
    entries = {e.hash: e for e in (ctx.score(g) for g in population)}
    return sorted(entries.values(), key=RankingEntry.sort_key)


def select_parents(ranking: list[RankingEntry], target: int) -> list[RankingEntry]:
    """Three top-ranked entries plus the three best-scored among those whose
    size is closest to ``target``.

    "Closest" is the band of entries whose ``|params - target|`` is within
    the 5th percentile of that distance; if the band (minus the first group)
    holds fewer than three entries, the next-closest entries fill in.
    """
    usable = [e for e in ranking if not e.degenerate]
    if len(usable) < 2 * PARENTS_PER_GROUP:
        warnings.warn(f"only {len(usable)} non-degenerate candidates; using all", SearchSpaceWarning,
                      stacklevel=2)
        return usable
    top = usable[:PARENTS_PER_GROUP]
    taken = {e.hash for e in top}
    dist = np.array([abs(e.params - target) for e in usable], dtype=float)
    band = float(np.percentile(dist, CLOSENESS_PERCENTILE))
    rest = [(e, d) for e, d in zip(usable, dist) if e.hash not in taken]
    in_band = sorted((e for e, d in rest if d <= band), key=lambda e: (-e.score, e.hash))
    outside = sorted(((e, d) for e, d in rest if d > band), key=lambda ed: (ed[1], -ed[0].score, ed[0].hash))
    close = (in_band + [e for e, _ in outside])[:PARENTS_PER_GROUP]
    return top + close


# -- tabu search ----------------------------------------------------------------------

@dataclass
class TabuRecord:
    hash: str
    genome: ArchitectureGenome
    iteration: int
    grade: Optional[float] = None
    reward: Optional[float] = None
    eligible: bool = True


class TabuList:
    """FIFO of recently visited genomes; doubles as the fallback pool."""

    def __init__(self, tenure: int = 20):
        if tenure < 1:
            raise ValueError("tenure must be >= 1")
        self.tenure = tenure
        self.records: deque[TabuRecord] = deque()

    def __contains__(self, h: str) -> bool:
        return any(r.hash == h for r in self.records)

    def __len__(self) -> int:
        return len(self.records)

    def hashes(self) -> list[str]:
        return [r.hash for r in self.records]

    def push(self, record: TabuRecord) -> None:
        self.records = deque(r for r in self.records if r.hash != record.hash)
        self.records.append(record)
        while len(self.records) > self.tenure:
            self.records.popleft()

    def best_fallback(self) -> Optional[TabuRecord]:
        """Highest recorded grade among eligible records, else highest reward."""
        graded = [r for r in self.records if r.eligible and r.grade is not None]
        if graded:
            return min(graded, key=lambda r: (-r.grade, r.hash))
        rewarded = [r for r in self.records if r.eligible and r.reward is not None]
        if rewarded:
            return min(rewarded, key=lambda r: (-r.reward, r.hash))
        return None


@dataclass
class TrajectoryRecord:
    parent_hash: str
    iteration: int
    child_hash: str
    reward: float
    accuracy: float
    params: int
    grade: float
    accepted: bool
    tabu_size: int
    current_hash: str
    stalled: bool = False

    CSV_COLUMNS = ("iteration", "child_hash", "reward", "accuracy", "params", "grade", "accepted", "tabu_size")

    def csv_row(self) -> list:
        if self.stalled:
            return [self.iteration, "", "", "", "", "", 0, self.tabu_size]
        return [self.iteration, self.child_hash, _fmt(self.reward), _fmt(self.accuracy), self.params,
                _fmt(self.grade), int(self.accepted), self.tabu_size]


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class SearchState:
    parent_hash: str
    current: ArchitectureGenome
    current_grade: float
    best: ArchitectureGenome
    best_grade: float
    iteration: int = 0
    no_improvement: int = 0
    tabu: TabuList = field(default_factory=TabuList)
    mutations: list = field(default_factory=list)
    stream_seed: int = 0

    @classmethod
    def start(cls, parent: ArchitectureGenome, ctx: Context, tenure: int = 20,
              seed: Optional[int] = None) -> "SearchState":
        """Train and grade ``parent``; mutation draws follow ``seed``
        (default: the context seed)."""
        ev = ctx.evaluate(parent)
        return cls(canonical_hash(parent), parent, ev.grade, parent, ev.grade, tabu=TabuList(tenure),
                   stream_seed=ctx.seed if seed is None else int(seed))

    def snapshot(self) -> dict:
        return {
            "parent": self.parent_hash,
            "current": canonical_hash(self.current),
            "current_grade": self.current_grade,
            "best": canonical_hash(self.best),
            "best_grade": self.best_grade,
            "iteration": self.iteration,
            "no_improvement": self.no_improvement,
            "tabu": [(r.hash, r.iteration, r.grade, r.reward, r.eligible) for r in self.tabu.records],
            "mutations": [m.to_json() for m in self.mutations],
        }


def ats_step(state: SearchState, ctx: Context, n: int = 8) -> tuple[SearchState, TrajectoryRecord]:
    """One tabu-search iteration; returns a new state and its trajectory row."""
    state = copy.deepcopy(state)
    state.iteration += 1
    it = state.iteration
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SearchSpaceWarning)
        proposals = propose_children(
            state.current, ctx.space, derive_seed(state.stream_seed, f"mutate:{state.parent_hash}", str(it)), n,
            exclude=state.tabu.hashes(),
        )
    if not proposals:
        state.no_improvement += 1
        logger.debug("iteration %d: no non-tabu children", it)
        return state, TrajectoryRecord(state.parent_hash, it, "", math.nan, math.nan, 0, math.nan, False,
                                       len(state.tabu), canonical_hash(state.current), stalled=True)

    parent_score = ctx.score(state.current).score
    scored = []
    for child, record in proposals:
        entry = ctx.score(child)
        r = reward(parent_score, entry.score, entry.params, ctx.objective.target, ctx.objective.alpha)
        scored.append((r.value, record.child_hash, child, record))
    best_reward = max(v for v, *_ in scored)
    r_val, child_hash, child, record = min(
        (s for s in scored if s[0] == best_reward), key=lambda s: s[1]
    )
    state.mutations.append(record)

    ev = ctx.evaluate(child)
    accepted = ev.grade > state.current_grade
    if accepted:
        state.tabu.push(TabuRecord(canonical_hash(state.current), state.current, it, state.current_grade))
        state.current, state.current_grade = child, ev.grade
        state.no_improvement = 0
    else:
        state.tabu.push(TabuRecord(child_hash, child, it, ev.grade, r_val))
        fallback = state.tabu.best_fallback()
        if fallback is not None:
            fallback.eligible = False
            state.current, state.current_grade = fallback.genome, fallback.grade
        state.no_improvement += 1
    if ev.grade > state.best_grade:
        state.best, state.best_grade = child, ev.grade
    return state, TrajectoryRecord(state.parent_hash, it, child_hash, r_val, ev.accuracy, ev.params, ev.grade,
                                   accepted, len(state.tabu), canonical_hash(state.current))


@dataclass
class ParentRun:
    parent_hash: str
    trajectory: list[TrajectoryRecord]
    best: ArchitectureGenome
    best_grade: float
    mutations: list[MutationRecord]


def run_parent(parent: ArchitectureGenome, ctx: Context, config: SearchConfig,
               seed: Optional[int] = None) -> ParentRun:
    state = SearchState.start(parent, ctx, config.tabu_tenure, seed)
    trajectory = []
    while state.iteration < config.max_iterations and state.no_improvement < config.patience:
        state, rec = ats_step(state, ctx, config.children)
        trajectory.append(rec)
    logger.info("parent %s: %d iterations, best grade %.4f", state.parent_hash[:12], state.iteration,
                state.best_grade)
    return ParentRun(state.parent_hash, trajectory, state.best, state.best_grade, list(state.mutations))


def _run_parent_job(ctx: Context, config: SearchConfig, seed: int, parent: ArchitectureGenome):
    result = run_parent(parent, ctx, config, seed)
    return result, ctx.scores, ctx.evals


@dataclass
class SearchResult:
    best: ArchitectureGenome
    best_eval: EvalResult
    ranking: list[RankingEntry]
    parents: list[RankingEntry]
    runs: list[ParentRun]
    final_ranking: list[EvalResult]


def run_search(ctx: Context, config: SearchConfig, seed: Optional[int] = None, workers: int = 1,
               population: Optional[list[ArchitectureGenome]] = None) -> SearchResult:
    """Seed, rank, select six parents, run tabu search from each, merge.

    Parent searches are independent; their results are merged in parent
    order, so serial and parallel runs agree.
    """
    seed = ctx.seed if seed is None else seed
    if population is None:
        population = seed_population(ctx.space, derive_seed(seed, "population"), config.population)
    ranking = rank_initial(population, ctx, workers)
    parents = select_parents(ranking, ctx.objective.target)
    logger.info("ranked %d genomes; parents %s", len(ranking), [p.hash[:12] for p in parents])

    if workers > 1 and len(parents) > 1:
        job = partial(_run_parent_job, ctx, config, seed)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(job, [p.genome for p in parents]))
        runs = []
        for run, scores, evals in outcomes:
            runs.append(run)
            for h, v in scores.items():
                ctx.scores.setdefault(h, v)
            for h, v in evals.items():
                ctx.evals.setdefault(h, v)
    else:
        runs = [run_parent(p.genome, ctx, config, seed) for p in parents]

    final = sorted((ctx.evals[h] for h in _trained_hashes(parents, runs)), key=lambda e: (-e.grade, e.hash))
    best_run = min(runs, key=lambda r: (-r.best_grade, canonical_hash(r.best)))
    return SearchResult(best_run.best, ctx.evals[canonical_hash(best_run.best)], ranking, parents, runs, final)


def _trained_hashes(parents, runs) -> set[str]:
    hashes = {p.hash for p in parents}
    for run in runs:
        hashes.update(rec.child_hash for rec in run.trajectory if not rec.stalled)
    return hashes


# -- baselines and oracles --------------------------------------------------------------

def random_search(ctx: Context, budget: int, seed: int) -> tuple[ArchitectureGenome, EvalResult]:
    """Train ``budget`` distinct random genomes; return the best by grade."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SearchSpaceWarning)
        pool = seed_population(ctx.space, seed, budget) if space_size(ctx.space) > budget else \
            [g for g in _shuffled(list(enumerate_genomes(ctx.space)), seed)][:budget]
    results = [(g, ctx.evaluate(g)) for g in pool]
    return min(results, key=lambda ge: (-ge[1].grade, ge[1].hash))


def _shuffled(items: list, seed: int) -> list:
    order = np.random.default_rng(seed).permutation(len(items))
    return [items[i] for i in order]


def brute_force(ctx: Context, workers: int = 1) -> list[tuple[ArchitectureGenome, RankingEntry, EvalResult]]:
    """Score and train every valid genome of the space (toy spaces only)."""
    genomes = list(enumerate_genomes(ctx.space))
    if workers > 1 and len(genomes) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for scores, evals in pool.map(partial(_brute_chunk, ctx), _chunks(genomes, workers)):
                ctx.scores.update(scores)
                ctx.evals.update(evals)
    rows = []
    for g in genomes:
        rows.append((g, ctx.score(g), ctx.evaluate(g)))
    return rows


def _brute_chunk(ctx: Context, genomes):
    for g in genomes:
        ctx.score(g)
        ctx.evaluate(g)
    return ctx.scores, ctx.evals
