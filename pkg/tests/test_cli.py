import json
import subprocess
import sys

import pytest

from nasf import cli
from nasf.config import ConfigError, parse_config
from nasf.runlog import RunLog
from conftest import free_tcp_address

TINY = {"ga": {"population_size": 4, "generations": 2, "seed": 3},
        "eval": {"epochs": 1, "batch_size": 8},
        "data": {"n_train": 16, "n_test": 8, "image_shape": [3, 4, 4]},
        "mode": "local"}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return path


def nasf(*args):
    return subprocess.run([sys.executable, "-m", "nasf.cli", *map(str, args)],
                          capture_output=True, text=True, timeout=300)


def test_defaults_parse():
    cfg = parse_config({})
    assert cfg.ga.population_size == 10 and cfg.mode == "local" and cfg.data.source == "synthetic"
    assert parse_config(cfg.to_dict()) == cfg


@pytest.mark.parametrize("doc,needle", [
    ({"ga": {"poulation": 3}}, "poulation"),
    ({"extra": 1}, "extra"),
    ({"eval": {"epochs": -1}}, "eval"),
    ({"data": {"source": "mnist"}}, "source"),
    ({"data": {"source": "cifar10"}}, "data_dir"),
    ({"mode": "island"}, "mode"),
])
def test_invalid_configs(doc, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(doc)


def test_unknown_key_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"ga": {"poulation": 3}}))
    proc = nasf("run", "--config", bad, "--out", tmp_path / "x.jsonl")
    assert proc.returncode == 2 and "poulation" in proc.stderr
    bad.write_text("{not json")
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2


def test_local_run_and_rerun_are_identical_except_timings(tmp_path, config):
    assert cli.main(["run", "--config", str(config), "--out", str(tmp_path / "a.jsonl")]) == 0
    assert cli.main(["run", "--config", str(config), "--out", str(tmp_path / "b.jsonl")]) == 0
    a, b = RunLog.read(tmp_path / "a.jsonl"), RunLog.read(tmp_path / "b.jsonl")
    assert len(a.evaluations) == 8
    assert a.without_timings() == b.without_timings()
    assert a.header["config"]["ga"]["population_size"] == 4


def test_default_config_produces_100_records(tmp_path):
    path = tmp_path / "defaults.json"
    path.write_text(json.dumps({"data": {"n_train": 16, "n_test": 8, "image_shape": [3, 4, 4]}}))
    assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / "d.jsonl")]) == 0
    assert len(RunLog.read(tmp_path / "d.jsonl").evaluations) == 100


@pytest.mark.parametrize("mode,world", [("dist-eval", 2), ("dist-pop", 3)])
def test_distributed_runs_with_worker_processes(tmp_path, config, mode, world):
    out = tmp_path / f"{mode}.jsonl"
    proc = nasf("run", "--config", config, "--out", out, "--mode", mode,
                "--world-size", world, "--spawn-workers", "--timeout", 60)
    assert proc.returncode == 0, proc.stderr
    log = RunLog.read(out)
    assert log.header["mode"] in ("distributed_evaluation", "distributed_population")
    assert log.header["world_size"] == world and len(log.evaluations) == 8


def test_dist_eval_log_matches_local(tmp_path, config):
    assert cli.main(["run", "--config", str(config), "--out", str(tmp_path / "l.jsonl")]) == 0
    proc = nasf("run", "--config", config, "--out", tmp_path / "d.jsonl", "--mode", "dist-eval",
                "--world-size", 2, "--spawn-workers")
    assert proc.returncode == 0, proc.stderr
    local, dist = RunLog.read(tmp_path / "l.jsonl"), RunLog.read(tmp_path / "d.jsonl")
    assert dist.chromosomes_by_generation() == local.chromosomes_by_generation()


def test_external_worker_exits_zero_after_shutdown(tmp_path, config):
    address = free_tcp_address()
    worker = subprocess.Popen([sys.executable, "-m", "nasf.cli", "worker", "--master", address],
                              stderr=subprocess.PIPE, text=True)
    code = cli.main(["run", "--config", str(config), "--out", str(tmp_path / "p.jsonl"),
                     "--mode", "dist-pop", "--world-size", "2", "--listen", address])
    assert code == 0
    assert worker.wait(timeout=60) == 0


def test_worker_without_master_exits_1():
    proc = nasf("worker", "--master", free_tcp_address(), "--timeout", 1)
    assert proc.returncode == 1 and "master" in proc.stderr


def test_master_without_workers_exits_1(tmp_path, config):
    code = cli.main(["run", "--config", str(config), "--out", str(tmp_path / "x.jsonl"),
                     "--mode", "dist-pop", "--world-size", "2", "--listen", free_tcp_address(),
                     "--timeout", "0.5"])
    assert code == 1


def test_mode_flag_constraints(tmp_path, config):
    assert cli.main(["run", "--config", str(config), "--out", str(tmp_path / "x"),
                     "--mode", "dist-pop"]) == 2
    assert cli.main(["run", "--config", str(config), "--out", str(tmp_path / "x"),
                     "--world-size", "3"]) == 2
    assert cli.main(["run", "--config", str(config), "--out", str(tmp_path / "x"),
                     "--dataset", "cifar10"]) == 2


def test_missing_cifar_is_a_runtime_error(tmp_path, config):
    assert cli.main(["run", "--config", str(config), "--out", str(tmp_path / "x"),
                     "--dataset", "cifar10", "--data-dir", str(tmp_path)]) == 1


def test_analyze_command(tmp_path, config, capsys):
    log = tmp_path / "run.jsonl"
    assert cli.main(["run", "--config", str(config), "--out", str(log)]) == 0
    assert cli.main(["analyze", str(log), "--out-dir", str(tmp_path / "csv")]) == 0
    assert "total wall time" in capsys.readouterr().out
    rows = (tmp_path / "csv" / "run.csv").read_text().splitlines()
    assert len(rows) == 1 + 1 + 2 + 1
    truncated = tmp_path / "cut.jsonl"
    truncated.write_text("".join(log.read_text().splitlines(keepends=True)[:-2]))
    assert cli.main(["analyze", str(truncated), "--out-dir", str(tmp_path / "csv2")]) == 1
    assert "generation 1" in capsys.readouterr().err
