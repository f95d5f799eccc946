"""Run logs: one JSON object per line.

The first line is a header; after it come ``evaluation`` records, one per
individual per generation, each generation closed by a ``generation`` record
carrying its wall time.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO

# fields that legitimately differ between otherwise identical runs
TIMING_FIELDS = ("started", "train_seconds", "wall_seconds")


class RunLogError(ValueError):
    pass


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


@dataclass
class RunLog:
    header: dict
    evaluations: list[dict] = field(default_factory=list)
    generations: list[dict] = field(default_factory=list)
    sink: IO[str] | None = field(default=None, repr=False, compare=False)

    @classmethod
    def start(cls, config: dict, mode: str, world_size: int, sink: IO[str] | None = None) -> "RunLog":
        header = {"type": "header", "config": config, "mode": mode, "world_size": world_size,
                  "started": time.time()}
        log = cls(header, sink=sink)
        log._emit(header)
        return log

    def _emit(self, record: dict) -> None:
        if self.sink is not None:
            self.sink.write(_dumps(record) + "\n")
            self.sink.flush()

    def record_generation(self, generation: int, population, wall_seconds: float) -> None:
        for index, ind in enumerate(population):
            res = ind.result
            rec = {"type": "evaluation", "generation": generation, "index": index,
                   "chromosome": list(ind.chromosome.genes), "accuracy": res.fitness,
                   "parameters": res.trainable_parameters, "train_seconds": res.train_seconds,
                   "status": res.status}
            if res.reason:
                rec["reason"] = res.reason
            self.evaluations.append(rec)
            self._emit(rec)
        rec = {"type": "generation", "generation": generation, "wall_seconds": wall_seconds}
        self.generations.append(rec)
        self._emit(rec)

    def records(self) -> list[dict]:
        out = [self.header]
        by_gen: dict[int, list[dict]] = {}
        for rec in self.evaluations:
            by_gen.setdefault(rec["generation"], []).append(rec)
        for gen in self.generations:
            out.extend(by_gen.get(gen["generation"], []))
            out.append(gen)
        return out

    def lines(self) -> list[str]:
        return [_dumps(r) for r in self.records()]

    def write(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()))

    def chromosomes_by_generation(self) -> list[list[tuple[int, ...]]]:
        out: dict[int, list] = {}
        for rec in self.evaluations:
            out.setdefault(rec["generation"], []).append(tuple(rec["chromosome"]))
        return [out[g] for g in sorted(out)]

    def without_timings(self) -> list[dict]:
        """Records with timing fields removed, for determinism comparisons."""
        return [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in self.records()]

    @classmethod
    def read(cls, path) -> "RunLog":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise RunLogError(f"cannot read {path}: {exc}") from exc
        records = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise RunLogError(f"{path}:{lineno}: not a JSON record ({exc})") from exc
        if not records or records[0].get("type") != "header":
            raise RunLogError(f"{path}: first record is not a header")
        log = cls(records[0])
        for lineno, rec in enumerate(records[1:], start=2):
            kind = rec.get("type")
            if kind == "evaluation":
                log.evaluations.append(rec)
            elif kind == "generation":
                log.generations.append(rec)
            else:
                raise RunLogError(f"{path}: record {lineno} has unknown type {kind!r}")
        return log
