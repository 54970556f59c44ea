"""Append-only metric log: one self-delimiting JSON record per line.

Key order is fixed (step, name, value, seed, wall_time), the step must be
non-decreasing per metric name within a run, and the file is flushed on every
write so a crashed run still leaves a readable log.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path


class MetricLogError(RuntimeError):
    pass


@dataclass(frozen=True)
class MetricRecord:
    step: int
    name: str
    value: float
    seed: int
    wall_time: float


class MetricLogger:
    def __init__(self, path, seed: int):
        self.path = Path(path)
        self.seed = seed
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")
        self._last_step: dict[str, int] = {}

    def log(self, step: int, name: str, value: float) -> MetricRecord:
        last = self._last_step.get(name)
        if last is not None and step < last:
            raise MetricLogError(
                f"non-monotone step for metric {name!r}: {step} after {last}"
            )
        self._last_step[name] = step
        record = MetricRecord(int(step), name, float(value), self.seed, time.time())
        line = json.dumps(
            {
                "step": record.step,
                "name": record.name,
                "value": record.value,
                "seed": record.seed,
                "wall_time": record.wall_time,
            }
        )
        try:
            self._fh.write(line + "\n")
            self._fh.flush()
        except OSError as exc:
            raise MetricLogError(f"metric log write failed: {exc}") from exc
        return record

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[MetricRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetricLogError(f"{path}:{lineno}: bad record: {exc}") from exc
            records.append(
                MetricRecord(
                    step=int(raw["step"]),
                    name=str(raw["name"]),
                    value=float(raw["value"]),
                    seed=int(raw["seed"]),
                    wall_time=float(raw["wall_time"]),
                )
            )
    return records
