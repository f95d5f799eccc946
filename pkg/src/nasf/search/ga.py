"""Generational genetic algorithm over two-conv-layer architectures.

A chromosome holds four genes ``(kernel1, filters1, kernel2, filters2)``,
each an integer in [1, 50]. Randomness comes from numpy's PCG64 generator
seeded with the configured seed, so a run replays exactly on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from nasf.descriptor import Descriptor, LayerKind
from nasf.evaluator import EvaluationResult

GENE_LOW, GENE_HIGH = 1, 50
N_GENES = 4
MODES = ("local", "distributed_evaluation", "distributed_population")
MODE_ALIASES = {"dist-eval": "distributed_evaluation", "dist-pop": "distributed_population"}


class UsageError(RuntimeError):
    pass


@dataclass(frozen=True)
class Chromosome:
    genes: tuple[int, int, int, int]

    def __post_init__(self):
        genes = tuple(int(g) for g in self.genes)
        if len(genes) != N_GENES:
            raise ValueError(f"chromosome needs {N_GENES} genes, got {len(genes)}")
        if not all(GENE_LOW <= g <= GENE_HIGH for g in genes):
            raise ValueError(f"genes must lie in [{GENE_LOW}, {GENE_HIGH}], got {genes}")
        object.__setattr__(self, "genes", genes)

    def __iter__(self):
        return iter(self.genes)

    def __getitem__(self, i):
        return self.genes[i]


@dataclass
class Individual:
    chromosome: Chromosome
    result: EvaluationResult | None = None

    @property
    def evaluated(self) -> bool:
        return self.result is not None

    @property
    def fitness(self) -> float | None:
        return None if self.result is None else self.result.fitness

    @property
    def parameters(self) -> int:
        return 0 if self.result is None else self.result.trainable_parameters


@dataclass(frozen=True)
class GAConfig:
    population_size: int = 10
    generations: int = 10
    crossover_rate: float = 0.9
    mutation_rate: float = 0.2
    tournament_size: int = 2
    elitism: int = 1
    seed: int = 0
    mode: str = "local"

    def __post_init__(self):
        mode = MODE_ALIASES.get(self.mode, self.mode)
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        for name in ("crossover_rate", "mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 1 <= self.tournament_size <= self.population_size:
            raise ValueError("tournament_size must lie in [1, population_size]")
        if not 0 <= self.elitism < self.population_size:
            raise ValueError("elitism must lie in [0, population_size)")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def decode(chromosome: Chromosome, input_shape=(3, 32, 32), classes: int = 10) -> Descriptor:
    """conv(k1, f1) -> relu -> conv(k2, f2) -> relu -> flatten -> dense(classes)."""
    k1, f1, k2, f2 = chromosome.genes
    in_channels, height, width = input_shape
    desc = Descriptor()
    desc.add_layer_sequential(LayerKind.CONV2D, {"in_channels": in_channels, "out_channels": f1, "kernel": k1})
    desc.add_layer_sequential(LayerKind.RELU)
    desc.add_layer_sequential(LayerKind.CONV2D, {"in_channels": f1, "out_channels": f2, "kernel": k2})
    desc.add_layer_sequential(LayerKind.RELU)
    desc.add_layer_sequential(LayerKind.FLATTEN)
    desc.add_layer_sequential(LayerKind.DENSE, {"in_features": f2 * height * width,
                                                "out_features": classes})
    return desc


def random_chromosome(rng: np.random.Generator) -> Chromosome:
    return Chromosome(tuple(int(g) for g in rng.integers(GENE_LOW, GENE_HIGH + 1, size=N_GENES)))


def init_population(cfg: GAConfig, rng: np.random.Generator | None = None) -> list[Individual]:
    rng = make_rng(cfg.seed) if rng is None else rng
    return [Individual(random_chromosome(rng)) for _ in range(cfg.population_size)]


def rank_key(population: Sequence[Individual], index: int):
    """Sort key: higher fitness, then fewer parameters, then lower index."""
    ind = population[index]
    if not ind.evaluated:
        raise UsageError(f"individual {index} has not been evaluated")
    return (-ind.fitness, ind.parameters, index)


def select(population: Sequence[Individual], rng: np.random.Generator,
           tournament_size: int = 2) -> Individual:
    """Tournament selection over distinct contestants."""
    for i in range(len(population)):
        rank_key(population, i)
    contestants = rng.choice(len(population), size=tournament_size, replace=False)
    winner = min(contestants, key=lambda i: rank_key(population, int(i)))
    return population[int(winner)]


def crossover(a: Chromosome, b: Chromosome, rng: np.random.Generator,
              rate: float = 0.9) -> tuple[Chromosome, Chromosome]:
    """Single-point crossover at a cut drawn from {1, 2, 3} with probability ``rate``."""
    if rng.random() >= rate:
        return a, b
    cut = int(rng.integers(1, N_GENES))
    return (Chromosome(a.genes[:cut] + b.genes[cut:]),
            Chromosome(b.genes[:cut] + a.genes[cut:]))


def mutate(chromosome: Chromosome, rng: np.random.Generator, rate: float = 0.2) -> Chromosome:
    """Resample each gene uniformly from [1, 50] with probability ``rate``."""
    genes = list(chromosome.genes)
    for i in range(N_GENES):
        if rng.random() < rate:
            genes[i] = int(rng.integers(GENE_LOW, GENE_HIGH + 1))
    return Chromosome(tuple(genes))


EvaluateFn = Callable[[Sequence[Chromosome]], list[EvaluationResult]]


def evaluate_population(population: list[Individual], evaluate_fn: EvaluateFn) -> None:
    pending = [ind for ind in population if not ind.evaluated]
    if not pending:
        return
    results = evaluate_fn([ind.chromosome for ind in pending])
    if len(results) != len(pending):
        raise UsageError(f"evaluator returned {len(results)} results for {len(pending)} chromosomes")
    for ind, res in zip(pending, results):
        ind.result = res


def breed(population: list[Individual], cfg: GAConfig, rng: np.random.Generator) -> list[Individual]:
    """Next population: elites carried over with their results, the rest
    bred by select -> crossover -> mutate and left unevaluated."""
    ranked = sorted(range(len(population)), key=lambda i: rank_key(population, i))
    nxt = [replace(population[i]) for i in ranked[:cfg.elitism]]
    while len(nxt) < cfg.population_size:
        a = select(population, rng, cfg.tournament_size)
        b = select(population, rng, cfg.tournament_size)
        c1, c2 = crossover(a.chromosome, b.chromosome, rng, cfg.crossover_rate)
        for child in (c1, c2):
            if len(nxt) < cfg.population_size:
                nxt.append(Individual(mutate(child, rng, cfg.mutation_rate)))
    return nxt


def evolve_generation(population: list[Individual], evaluate_fn: EvaluateFn, cfg: GAConfig,
                      rng: np.random.Generator) -> list[Individual]:
    nxt = breed(population, cfg, rng)
    evaluate_population(nxt, evaluate_fn)
    return nxt


def each(fn: Callable[[Chromosome], EvaluationResult],
         passthrough: tuple[type[BaseException], ...] = ()) -> EvaluateFn:
    """Lift a per-chromosome evaluator to a batch one; its errors score 0.

    Exceptions listed in ``passthrough`` (e.g. communication failures) still
    propagate.
    """
    def evaluate(chromosomes):
        out = []
        for chrom in chromosomes:
            try:
                out.append(fn(chrom))
            except passthrough:
                raise
            except Exception as exc:  # noqa: BLE001 - penalty fitness by contract
                out.append(EvaluationResult.failed(f"error: {exc}"))
        return out
    return evaluate


def fake_fitness(chromosome: Chromosome) -> float:
    """Known landscape peaking at all genes = 25."""
    return 1.0 - float(np.mean([abs(g - 25) for g in chromosome.genes])) / 25.0


def fake_evaluate(chromosome: Chromosome, input_shape=(3, 8, 8), classes: int = 4) -> EvaluationResult:
    params = decode(chromosome, input_shape, classes).count_parameters(input_shape)
    return EvaluationResult(max(0.0, fake_fitness(chromosome)), params, 0.0, 0)


def population_digest(population: Sequence[Individual]) -> str:
    return ";".join(",".join(map(str, ind.chromosome.genes)) for ind in population)
