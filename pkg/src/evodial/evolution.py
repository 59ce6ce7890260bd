"""Real-vector genetic algorithm over [0, 1]^n chromosomes.

Each generation keeps one elite copy of the previous fittest (with its cached
fitness, so the best-fitness trace never decreases), adds n_mut mutants of
that fittest, and fills the rest with mutate(crossover(tournament, tournament))
children.  Mutation perturbs genes with a skewed half-Gaussian centered at the
current value, rejection-resampled to stay inside [0, 1].
"""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Protocol, Sequence

import numpy as np

_OPS_STREAM = 1
_EVAL_STREAM = 2

PERTURB_MAX_RETRIES = 64


class InvalidConfig(Exception):
    pass


class GenomeLengthMismatch(Exception):
    pass


class FitnessEvaluationFailure(Exception):
    def __init__(self, generation: int, index: int, cause: BaseException):
        super().__init__(
            f"fitness evaluation failed at generation {generation}, "
            f"individual {index}: {cause!r}")
        self.generation = generation
        self.index = index
        self.__cause__ = cause


class FitnessFunction(Protocol):
    """Fitness contract: higher is better, reproducible under a fixed stream."""

    n_params: int

    def evaluate(self, genome: np.ndarray, rng: np.random.Generator) -> float:
        ...


@dataclass
class Individual:
    genome: np.ndarray
    fitness: float | None = None

    def copy(self) -> "Individual":
        return Individual(self.genome.copy(), self.fitness)


@dataclass(frozen=True)
class GaConfig:
    n_pop: int = 100
    n_mut: int = 5
    t_max: int = 30
    k: int = 3
    sigma: float = 2.0
    mu_mut: float = 0.25
    seed: int = 0
    convergence_window: int | None = 10
    crossover_style: str = "uniform"  # or "single_point"

    def to_dict(self) -> dict:
        return {"n_pop": self.n_pop, "n_mut": self.n_mut, "t_max": self.t_max,
                "k": self.k, "sigma": self.sigma, "mu_mut": self.mu_mut,
                "seed": self.seed,
                "convergence_window": self.convergence_window,
                "crossover_style": self.crossover_style}

    @classmethod
    def from_dict(cls, data: dict) -> "GaConfig":
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.n_pop < 1:
            raise InvalidConfig("n_pop must be >= 1")
        if self.n_mut < 0 or self.n_mut + 1 > self.n_pop:
            raise InvalidConfig("need n_mut + 1 <= n_pop")
        if not 1 <= self.k <= self.n_pop:
            raise InvalidConfig("need 1 <= k <= n_pop")
        if self.sigma <= 0:
            raise InvalidConfig("sigma must be positive")
        if not 0.0 <= self.mu_mut <= 1.0:
            raise InvalidConfig("mu_mut must lie in [0, 1]")
        if self.t_max < 0:
            raise InvalidConfig("t_max must be >= 0")
        if self.convergence_window is not None and self.convergence_window < 1:
            raise InvalidConfig("convergence_window must be >= 1 or None")
        if self.crossover_style not in ("uniform", "single_point"):
            raise InvalidConfig(f"unknown crossover style {self.crossover_style!r}")


@dataclass(frozen=True)
class TraceRow:
    generation: int
    best_fitness: float
    mean_fitness: float
    std_fitness: float


@dataclass
class GenerationTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def best_history(self) -> list[float]:
        return [r.best_fitness for r in self.rows]

    def write_csv(self, fp: IO[str]) -> None:
        writer = csv.writer(fp)
        writer.writerow(["generation", "best_fitness", "mean_fitness", "std_fitness"])
        for r in self.rows:
            writer.writerow([r.generation, repr(r.best_fitness),
                             repr(r.mean_fitness), repr(r.std_fitness)])


def perturb(theta: float, sigma: float, rng: np.random.Generator) -> float:
    """Skewed half-Gaussian noise around theta, resampled until inside [0, 1].

    With probability theta the draw moves left (toward 0), scaled by theta;
    otherwise right, scaled by 1 - theta.  The peak of the resulting density
    sits at theta.  After PERTURB_MAX_RETRIES out-of-range draws theta is
    returned unchanged (unreachable for any realistic sigma).
    """
    for _ in range(PERTURB_MAX_RETRIES):
        g = abs(rng.standard_normal())
        if rng.random() < theta:
            v = -(g / sigma) * theta + theta
        else:
            v = (g / sigma) * (1.0 - theta) + theta
        if 0.0 <= v <= 1.0:
            return float(v)
    return float(theta)


def mutate(ind: Individual, sigma: float, mu_mut: float,
           rng: np.random.Generator) -> Individual:
    """Independently perturb each gene with probability mu_mut."""
    genome = ind.genome.copy()
    for i in range(len(genome)):
        if rng.random() < mu_mut:
            genome[i] = perturb(genome[i], sigma, rng)
    return Individual(genome)


def crossover(a: Individual, b: Individual, rng: np.random.Generator,
              style: str = "uniform") -> Individual:
    """Child genome from two parents; uniform per-gene exchange by default."""
    if a.genome.shape != b.genome.shape:
        raise GenomeLengthMismatch(
            f"parent genomes differ in length: {a.genome.shape} vs {b.genome.shape}")
    n = len(a.genome)
    if style == "single_point":
        if n < 2:
            return Individual(a.genome.copy())
        point = int(rng.integers(1, n))
        return Individual(np.concatenate([a.genome[:point], b.genome[point:]]))
    mask = rng.random(n) < 0.5
    return Individual(np.where(mask, a.genome, b.genome))


def tournament_select(pop: Sequence[Individual], k: int,
                      rng: np.random.Generator) -> Individual:
    """Fittest member of a uniformly-sampled k-subset (without replacement)."""
    if not 1 <= k <= len(pop):
        raise InvalidConfig(f"tournament size {k} not in [1, {len(pop)}]")
    picks = rng.choice(len(pop), size=k, replace=False)
    best = picks[0]
    for i in picks[1:]:
        if pop[i].fitness > pop[best].fitness:
            best = i
    return pop[best]


def _eval_stream(seed: int, generation: int, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, _EVAL_STREAM, generation, index]))


def _eval_one(args) -> float:
    fitness, genome, seed, generation, index = args
    return float(fitness.evaluate(genome, _eval_stream(seed, generation, index)))


def _evaluate_population(pop: list[Individual], fitness: FitnessFunction,
                         seed: int, generation: int, n_workers: int) -> None:
    pending = [(i, ind) for i, ind in enumerate(pop) if ind.fitness is None]
    if not pending:
        return
    if n_workers > 1:
        jobs = [(fitness, ind.genome, seed, generation, i) for i, ind in pending]
        try:
            with ProcessPoolExecutor(max_workers=n_workers) as pool:
                results = list(pool.map(_eval_one, jobs))
        except Exception as exc:  # surfaced with best-effort location
            raise FitnessEvaluationFailure(generation, -1, exc) from exc
        for (i, ind), value in zip(pending, results):
            ind.fitness = value
        return
    for i, ind in pending:
        try:
            ind.fitness = float(fitness.evaluate(
                ind.genome, _eval_stream(seed, generation, i)))
        except Exception as exc:
            raise FitnessEvaluationFailure(generation, i, exc) from exc


def _fittest_index(pop: list[Individual]) -> int:
    best = 0
    for i in range(1, len(pop)):
        if pop[i].fitness > pop[best].fitness:
            best = i
    return best


def run_ga(fitness: FitnessFunction, cfg: GaConfig,
           n_workers: int = 1) -> tuple[Individual, GenerationTrace]:
    """Run the GA and return the final fittest individual plus the trace.

    Serial and parallel (n_workers > 1) execution produce identical results:
    every fitness evaluation uses an RNG stream derived from (seed,
    generation, individual index), and GA bookkeeping stays on a single
    operations stream.
    """
    cfg.validate()
    n_params = fitness.n_params
    if n_params < 1:
        raise InvalidConfig("fitness function must declare n_params >= 1")
    ops = np.random.default_rng(np.random.SeedSequence([cfg.seed, _OPS_STREAM]))
    pop = [Individual(ops.random(n_params)) for _ in range(cfg.n_pop)]
    _evaluate_population(pop, fitness, cfg.seed, 0, n_workers)
    trace = GenerationTrace()

    def record(gen: int) -> float:
        values = np.array([ind.fitness for ind in pop])
        row = TraceRow(gen, float(values.max()), float(values.mean()),
                       float(values.std()))
        trace.rows.append(row)
        return row.best_fitness

    best = record(0)
    stale = 0
    for t in range(1, cfg.t_max + 1):
        elite = pop[_fittest_index(pop)]
        next_pop = [elite.copy()]
        for _ in range(cfg.n_mut):
            next_pop.append(mutate(elite, cfg.sigma, cfg.mu_mut, ops))
        for _ in range(cfg.n_pop - cfg.n_mut - 1):
            p1 = tournament_select(pop, cfg.k, ops)
            p2 = tournament_select(pop, cfg.k, ops)
            child = crossover(p1, p2, ops, cfg.crossover_style)
            next_pop.append(mutate(child, cfg.sigma, cfg.mu_mut, ops))
        pop = next_pop
        _evaluate_population(pop, fitness, cfg.seed, t, n_workers)
        new_best = record(t)
        stale = stale + 1 if new_best == best else 0
        best = new_best
        if cfg.convergence_window is not None and stale >= cfg.convergence_window:
            break
    return pop[_fittest_index(pop)].copy(), trace
