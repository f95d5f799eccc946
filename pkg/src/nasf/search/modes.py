"""The three execution modes of the search.

``local``
    One process evaluates every individual in turn.
``distributed_evaluation``
    Every rank runs the same GA and each individual is trained collectively
    with gradient averaging across ranks.
``distributed_population``
    Rank 0 holds the GA and hands individuals to worker ranks round-robin;
    each worker trains its networks alone. A generation ends when every
    result is back.
"""

from __future__ import annotations

import json
import logging
import time
from typing import Callable

from nasf import curator
from nasf.comms import CommError, Environment, MsgType, ProtocolError, fnv1a_64
from nasf.descriptor import Descriptor
from nasf.evaluator import (
    EvaluationConfig, EvaluationResult, agree_on, descriptor_evaluate,
    distributed_descriptor_evaluate,
)
from nasf.runlog import RunLog
from nasf.search.ga import (
    Chromosome, EvaluateFn, GAConfig, Individual, breed, decode, each, evaluate_population,
    init_population, make_rng, population_digest,
)

log = logging.getLogger(__name__)

Data = tuple[curator.Dataset, curator.Dataset]
Guard = Callable[[int, list[Individual]], None]
# worker-side evaluator: (descriptor, config) -> result
TaskEvaluator = Callable[[Descriptor, EvaluationConfig], EvaluationResult]


def run_ga(cfg: GAConfig, evaluate_fn: EvaluateFn, runlog: RunLog,
           guard: Guard | None = None) -> list[list[Individual]]:
    """Generational loop shared by all modes; returns every generation's population."""
    rng = make_rng(cfg.seed)
    history = []
    population: list[Individual] = []
    for generation in range(cfg.generations):
        started = time.perf_counter()
        population = init_population(cfg, rng) if generation == 0 else breed(population, cfg, rng)
        if guard is not None:
            guard(generation, population)
        evaluate_population(population, evaluate_fn)
        runlog.record_generation(generation, population, time.perf_counter() - started)
        history.append(population)
        log.info("generation %d best %.4f", generation, max(i.fitness for i in population))
    return history


def _start_log(runlog: RunLog | None, cfg: GAConfig, world_size: int) -> RunLog:
    if runlog is not None:
        return runlog
    return RunLog.start({"ga": cfg.__dict__.copy()}, cfg.mode, world_size)


def run_mode_local(cfg: GAConfig, ecfg: EvaluationConfig, data: Data,
                   runlog: RunLog | None = None) -> RunLog:
    runlog = _start_log(runlog, cfg, 1)
    shape, classes = data[0].shape, data[0].classes
    evaluate = each(lambda c: descriptor_evaluate(decode(c, shape, classes), data, ecfg))
    run_ga(cfg, evaluate, runlog)
    return runlog


def generation_guard(env: Environment) -> Guard:
    """Abort on every rank if the ranks' populations have drifted apart."""
    def guard(generation: int, population: list[Individual]) -> None:
        digest = fnv1a_64(population_digest(population).encode())
        agree_on(env, digest, f"generation {generation} chromosomes")
    return guard


def run_mode_distributed_evaluation(cfg: GAConfig, ecfg: EvaluationConfig, data: Data,
                                    env: Environment, runlog: RunLog | None = None) -> RunLog:
    """Collective call: every rank runs the same GA; rank 0's log is the record."""
    runlog = _start_log(runlog, cfg, env.world_size)
    shape, classes = data[0].shape, data[0].classes
    evaluate = each(
        lambda c: distributed_descriptor_evaluate(decode(c, shape, classes), data, ecfg, env),
        passthrough=(CommError,))
    run_ga(cfg, evaluate, runlog, generation_guard(env))
    return runlog


# --------------------------------------------------------------------------
# distributed population
# --------------------------------------------------------------------------

def task_payload(desc: Descriptor, ecfg: EvaluationConfig) -> bytes:
    return json.dumps({"descriptor": desc.to_dict(), "eval": ecfg.to_dict()},
                      sort_keys=True).encode()


def parse_task(payload: bytes) -> tuple[Descriptor, EvaluationConfig]:
    doc = json.loads(payload.decode("utf-8"))
    return Descriptor.from_dict(doc["descriptor"]), EvaluationConfig.from_dict(doc["eval"])


def round_robin(n_tasks: int, n_workers: int) -> list[int]:
    """Worker rank for each task; ranks start at 1 because rank 0 is the master."""
    return [1 + i % n_workers for i in range(n_tasks)]


def dispatch(env: Environment, ecfg: EvaluationConfig, shape, classes) -> EvaluateFn:
    """Batch evaluator that farms chromosomes out to the worker ranks."""
    def evaluate(chromosomes: list[Chromosome]) -> list[EvaluationResult]:
        owners = round_robin(len(chromosomes), env.world_size - 1)
        for tag, (chrom, rank) in enumerate(zip(chromosomes, owners)):
            env.send(rank, MsgType.TASK, task_payload(decode(chrom, shape, classes), ecfg), tag)
        results = []
        # each worker answers its tasks in the order they were sent
        for tag, rank in enumerate(owners):
            reply = env.recv(rank)
            if reply.msg_type is not MsgType.RESULT or reply.tag != tag:
                raise ProtocolError(f"rank {rank} sent {reply.msg_type.name} tag {reply.tag}, "
                                    f"expected RESULT tag {tag}")
            try:
                results.append(EvaluationResult.from_dict(json.loads(reply.payload)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ProtocolError(f"rank {rank} sent a malformed RESULT: {exc}") from exc
        return results
    return evaluate


def run_mode_distributed_population(cfg: GAConfig, ecfg: EvaluationConfig, data: Data,
                                    env: Environment, runlog: RunLog | None = None,
                                    setup: dict | None = None) -> RunLog:
    """Master side. ``setup`` is broadcast to the workers before the first task;
    :func:`worker_loop` hands it to its data factory."""
    if env.rank != 0:
        raise ProtocolError("the distributed-population master must be rank 0")
    if env.world_size < 2:
        raise ProtocolError("distributed population needs at least one worker rank")
    runlog = _start_log(runlog, cfg, env.world_size)
    env.broadcast_bytes(json.dumps(setup or {}, sort_keys=True).encode())
    run_ga(cfg, dispatch(env, ecfg, data[0].shape, data[0].classes), runlog)
    return runlog


def worker_loop(env: Environment, data_factory: Callable[[dict], Data] | None = None,
                evaluate: TaskEvaluator | None = None) -> int:
    """Serve TASK messages until SHUTDOWN; returns the number of tasks served.

    A task that cannot be parsed or evaluated is answered with a failed
    result so the master's generation still completes.
    """
    setup = json.loads(env.broadcast_bytes(b"").decode() or "{}")
    if evaluate is None:
        if data_factory is None:
            raise ValueError("worker_loop needs a data factory or an evaluate function")
        data = data_factory(setup)
        evaluate = lambda desc, ecfg: descriptor_evaluate(desc, data, ecfg)  # noqa: E731
    served = 0
    while True:
        msg = env.recv(0)
        if msg.msg_type is MsgType.SHUTDOWN:
            return served
        if msg.msg_type is not MsgType.TASK:
            raise ProtocolError(f"worker expected TASK or SHUTDOWN, got {msg.msg_type.name}")
        try:
            desc, ecfg = parse_task(msg.payload)
            result = evaluate(desc, ecfg)
        except Exception as exc:  # noqa: BLE001 - a bad task must not kill the worker
            result = EvaluationResult.failed(f"task: {exc}")
        env.send(0, MsgType.RESULT, result.to_json().encode(), msg.tag)
        served += 1
