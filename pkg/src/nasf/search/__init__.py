"""Genetic-algorithm search and its execution modes."""

from nasf.search.ga import (
    MODES, Chromosome, GAConfig, Individual, UsageError, breed, crossover, decode, each,
    evaluate_population, evolve_generation, fake_evaluate, fake_fitness, init_population,
    make_rng, mutate, rank_key, select,
)
from nasf.search.modes import (
    dispatch, round_robin, run_ga, run_mode_distributed_evaluation,
    run_mode_distributed_population, run_mode_local, worker_loop,
)

__all__ = [
    "MODES", "Chromosome", "GAConfig", "Individual", "UsageError", "breed", "crossover",
    "decode", "each", "evaluate_population", "evolve_generation", "fake_evaluate",
    "fake_fitness", "init_population", "make_rng", "mutate", "rank_key", "select",
    "dispatch", "round_robin", "run_ga", "run_mode_distributed_evaluation",
    "run_mode_distributed_population", "run_mode_local", "worker_loop",
]
