"""Per-generation statistics and CSV reports computed from run logs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nasf.runlog import RunLog

QUANTILE_NOTE = ("# quantiles: linear interpolation between closest ranks, "
                 "q(p) = x[floor(h)] + (h - floor(h)) * (x[floor(h)+1] - x[floor(h)]), h = (n-1)p")
COLUMNS = ["generation", "mean_accuracy", "min", "q1", "median", "q3", "max",
           "mean_parameters", "wall_seconds"]


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    mean_accuracy: float
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean_parameters: float
    wall_seconds: float

    def row(self) -> list[str]:
        return [str(self.generation)] + [fmt(getattr(self, c)) for c in COLUMNS[1:]]


def fmt(x: float) -> str:
    return f"{float(x):.6g}"


def quantiles(values) -> tuple[float, float, float, float, float]:
    """min, q1, median, q3, max with linear interpolation."""
    q = np.quantile(np.asarray(values, dtype=np.float64), [0.0, 0.25, 0.5, 0.75, 1.0],
                    method="linear")
    return tuple(float(v) for v in q)


def _expected_population(log: RunLog) -> int | None:
    ga = log.header.get("config", {}).get("ga", {})
    return ga.get("population_size")


def generation_stats(log: RunLog) -> list[GenerationStats]:
    """One entry per generation; raises AnalysisError on incomplete logs."""
    by_gen: dict[int, list[dict]] = {}
    for rec in log.evaluations:
        by_gen.setdefault(int(rec["generation"]), []).append(rec)
    walls = {int(r["generation"]): float(r["wall_seconds"]) for r in log.generations}
    gens = sorted(set(by_gen) | set(walls))
    if gens != list(range(len(gens))):
        missing = sorted(set(range(max(gens, default=-1) + 1)) - set(gens))
        raise AnalysisError(f"generation {missing[0]} is missing")
    expected = _expected_population(log)
    out = []
    for g in gens:
        recs = by_gen.get(g, [])
        if not recs:
            raise AnalysisError(f"generation {g} has no evaluation records")
        if g not in walls:
            raise AnalysisError(f"generation {g} is incomplete: no wall-time record")
        if expected is not None and len(recs) != expected:
            raise AnalysisError(f"generation {g} is incomplete: {len(recs)} of {expected} evaluations")
        acc = np.array([float(r["accuracy"]) for r in recs])
        if np.any(acc < 0) or np.any(acc > 1):
            raise AnalysisError(f"generation {g} has accuracies outside [0, 1]")
        params = np.array([float(r["parameters"]) for r in recs])
        lo, q1, med, q3, hi = quantiles(acc)
        out.append(GenerationStats(g, float(acc.mean()), lo, q1, med, q3, hi,
                                   float(params.mean()), walls[g]))
    return out


def elitism_violations(log: RunLog) -> list[int]:
    """Generations whose best fitness fell below the previous generation's best."""
    if log.header.get("config", {}).get("ga", {}).get("elitism", 1) < 1:
        return []
    best: dict[int, float] = {}
    for rec in log.evaluations:
        g = int(rec["generation"])
        best[g] = max(best.get(g, 0.0), float(rec["accuracy"]))
    gens = sorted(best)
    return [g for prev, g in zip(gens, gens[1:]) if best[g] < best[prev]]


def stats_csv(stats: list[GenerationStats]) -> str:
    buf = io.StringIO()
    buf.write(QUANTILE_NOTE + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for s in stats:
        w.writerow(s.row())
    w.writerow(["total"] + [""] * (len(COLUMNS) - 2) + [fmt(sum(s.wall_seconds for s in stats))])
    return buf.getvalue()


def comparison_csv(labelled: list[tuple[str, list[GenerationStats]]]) -> str:
    buf = io.StringIO()
    buf.write(QUANTILE_NOTE + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["log"] + COLUMNS)
    for label, stats in labelled:
        for s in stats:
            w.writerow([label] + s.row())
    for label, stats in labelled:
        w.writerow([label, "total"] + [""] * (len(COLUMNS) - 2)
                   + [fmt(sum(s.wall_seconds for s in stats))])
    return buf.getvalue()


def labels_for(paths) -> list[str]:
    labels, seen = [], {}
    for p in paths:
        stem = Path(p).stem
        seen[stem] = seen.get(stem, 0) + 1
        labels.append(stem if seen[stem] == 1 else f"{stem}_{seen[stem]}")
    return labels


def analyze(paths, out_dir) -> dict:
    """Write ``<label>.csv`` per log and ``comparison.csv``; returns a summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labelled, violations = [], {}
    for path, label in zip(paths, labels_for(paths)):
        log = RunLog.read(path)
        try:
            stats = generation_stats(log)
        except AnalysisError as exc:
            raise AnalysisError(f"{path}: {exc}") from None
        (out_dir / f"{label}.csv").write_text(stats_csv(stats))
        labelled.append((label, stats))
        bad = elitism_violations(log)
        if bad:
            violations[label] = bad
    (out_dir / "comparison.csv").write_text(comparison_csv(labelled))
    return {"logs": [label for label, _ in labelled], "elitism_violations": violations,
            "total_wall_seconds": {label: sum(s.wall_seconds for s in st) for label, st in labelled}}
