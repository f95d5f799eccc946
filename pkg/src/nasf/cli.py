"""Command line: ``nasf run``, ``nasf worker`` and ``nasf analyze``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import socket
import subprocess
import sys

from nasf import analysis
from nasf.comms import CommError, init_master, init_worker
from nasf.config import (
    CIFAR_SHAPE, ConfigError, DataConfig, RunConfig, load_config, parse_config,
)
from nasf.curator import LoadError
from nasf.runlog import RunLog, RunLogError
from nasf.search.ga import MODE_ALIASES
from nasf.search.modes import (
    run_mode_distributed_evaluation, run_mode_distributed_population, run_mode_local,
    worker_loop,
)

log = logging.getLogger("nasf")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
RUNTIME_ERRORS = (CommError, LoadError, OSError, RunLogError, analysis.AnalysisError)


def _free_address(host: str = "127.0.0.1") -> str:
    with socket.socket() as s:
        s.bind((host, 0))
        return f"{host}:{s.getsockname()[1]}"


def _spawn_workers(address: str, count: int, timeout: float | None) -> list[subprocess.Popen]:
    cmd = [sys.executable, "-m", "nasf.cli", "worker", "--master", address]
    if timeout is not None:
        cmd += ["--timeout", str(timeout)]
    return [subprocess.Popen(cmd) for _ in range(count)]


def _setup_doc(cfg: RunConfig) -> bytes:
    return json.dumps({"config": cfg.to_dict()}, sort_keys=True).encode()


def _override_data(cfg: RunConfig, dataset: str | None, data_dir: str | None) -> RunConfig:
    changes = {}
    if dataset == "cifar10":
        changes.update(source="cifar10", classes=10, image_shape=CIFAR_SHAPE)
    elif dataset == "synthetic":
        changes["source"] = "synthetic"
    if data_dir:
        changes["data_dir"] = data_dir
    if not changes:
        return cfg
    try:
        return dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, **changes))
    except ValueError as exc:
        raise ConfigError(f"invalid data override: {exc}") from exc


def cmd_run(args) -> int:
    cfg = _override_data(load_config(args.config), args.dataset, args.data_dir)
    if args.mode:
        cfg = cfg.with_mode(MODE_ALIASES.get(args.mode, args.mode))
    world = args.world_size or 1
    if cfg.mode == "distributed_population" and world < 2:
        raise ConfigError("distributed_population needs --world-size >= 2")
    if cfg.mode == "local" and world != 1:
        raise ConfigError("local mode runs on a single rank; drop --world-size")
    data = cfg.data.load()
    workers: list[subprocess.Popen] = []
    with open(args.out, "w") as sink:
        if cfg.mode == "local":
            runlog = RunLog.start(cfg.to_dict(), cfg.mode, 1, sink)
            run_mode_local(cfg.ga, cfg.eval, data, runlog)
            return EXIT_OK
        address = args.listen or os.environ.get("NASF_MASTER")
        if args.spawn_workers and world > 1:
            address = address or _free_address()
            workers = _spawn_workers(address, world - 1, args.timeout)
        try:
            with init_master(address, world, args.timeout) as env:
                env.broadcast_bytes(_setup_doc(cfg))
                runlog = RunLog.start(cfg.to_dict(), cfg.mode, world, sink)
                if cfg.mode == "distributed_evaluation":
                    run_mode_distributed_evaluation(cfg.ga, cfg.eval, data, env, runlog)
                else:
                    run_mode_distributed_population(cfg.ga, cfg.eval, data, env, runlog,
                                                    setup={"data": cfg.data.to_dict()})
        finally:
            failed = [w.wait() for w in workers]
            if any(failed):
                log.error("worker exit codes: %s", failed)
    return EXIT_OK


def cmd_worker(args) -> int:
    with init_worker(args.master, args.timeout) as env:
        setup = json.loads(env.broadcast_bytes(b""))
        cfg = parse_config(setup["config"])
        if cfg.mode == "distributed_evaluation":
            run_mode_distributed_evaluation(cfg.ga, cfg.eval, cfg.data.load(), env,
                                            RunLog.start(cfg.to_dict(), cfg.mode, env.world_size))
        elif cfg.mode == "distributed_population":
            served = worker_loop(env, lambda doc: DataConfig(**doc["data"]).load())
            log.info("rank %d served %d tasks", env.rank, served)
        else:
            raise ConfigError(f"mode {cfg.mode} has no worker role")
    return EXIT_OK


def cmd_analyze(args) -> int:
    summary = analysis.analyze(args.logs, args.out_dir)
    for label in summary["logs"]:
        print(f"{label}: total wall time {analysis.fmt(summary['total_wall_seconds'][label])} s")
    if summary["elitism_violations"]:
        for label, gens in summary["elitism_violations"].items():
            print(f"{label}: best fitness dropped at generation(s) {gens}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nasf", description="Distributed neural architecture search")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a search and write its log")
    run.add_argument("--config", required=True, help="JSON run configuration")
    run.add_argument("--out", required=True, help="run log to write (one JSON record per line)")
    run.add_argument("--mode", choices=["local", "dist-eval", "dist-pop",
                                        "distributed_evaluation", "distributed_population"])
    run.add_argument("--dataset", choices=["synthetic", "cifar10"], help="override data.source")
    run.add_argument("--data-dir", help="override data.data_dir (CIFAR-10 binary batches)")
    run.add_argument("--listen", help="host:port the master listens on (default $NASF_MASTER)")
    run.add_argument("--world-size", type=int, help="total ranks including the master")
    run.add_argument("--spawn-workers", action="store_true",
                     help="start the worker ranks as local subprocesses")
    run.add_argument("--timeout", type=float, help="communication timeout in seconds")
    run.set_defaults(func=cmd_run)

    worker = sub.add_parser("worker", help="join a distributed run")
    worker.add_argument("--master", help="master host:port (default $NASF_MASTER)")
    worker.add_argument("--timeout", type=float, help="communication timeout in seconds")
    worker.set_defaults(func=cmd_worker)

    an = sub.add_parser("analyze", help="per-generation statistics as CSV")
    an.add_argument("logs", nargs="+", help="run logs")
    an.add_argument("--out-dir", required=True)
    an.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"nasf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        print(f"nasf: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
