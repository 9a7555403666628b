"""Performance counters collected during a run and their CSV form."""

from __future__ import annotations

import csv
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

SCALAR_COUNTERS = (
    "tasks_spawned",
    "envelopes_sent",
    "frames_sent",
    "bytes_sent",
    "collectives_completed",
    "wall_time_ns",
)


class PrimitiveCounters:
    """Thread-safe per-primitive invocation counts and cumulative nanoseconds."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls: dict[str, list[int]] = {}

    def record(self, name: str, elapsed_ns: int) -> None:
        with self._lock:
            entry = self.calls.setdefault(name, [0, 0])
            entry[0] += 1
            entry[1] += elapsed_ns

    def snapshot(self) -> dict[str, tuple[int, int]]:
        with self._lock:
            return {k: (v[0], v[1]) for k, v in self.calls.items()}


@dataclass
class CounterReport:
    tasks_spawned: int = 0
    envelopes_sent: int = 0
    frames_sent: int = 0
    bytes_sent: int = 0
    collectives_completed: int = 0
    wall_time_ns: int = 0
    primitives: dict[str, tuple[int, int]] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, int]]:
        out = [(name, getattr(self, name)) for name in SCALAR_COUNTERS]
        for prim in sorted(self.primitives):
            count, ns = self.primitives[prim]
            out.append((f"primitive.{prim}.count", count))
            out.append((f"primitive.{prim}.ns", ns))
        return out

    def to_dict(self) -> dict:
        return {name: value for name, value in self.rows()}

    @classmethod
    def from_rows(cls, rows) -> "CounterReport":
        report = cls()
        prims: dict[str, list[int]] = {}
        for name, value in rows:
            value = int(value)
            if name.startswith("primitive."):
                prim, kind = name[len("primitive.") :].rsplit(".", 1)
                prims.setdefault(prim, [0, 0])[0 if kind == "count" else 1] = value
            elif name in SCALAR_COUNTERS:
                setattr(report, name, value)
            else:
                raise ValueError(f"unknown counter {name!r}")
        report.primitives = {k: (v[0], v[1]) for k, v in prims.items()}
        return report

    @classmethod
    def merge(cls, reports: list["CounterReport"]) -> "CounterReport":
        """Sum per-locality reports; wall time is the longest one."""
        total = cls()
        for r in reports:
            for name in SCALAR_COUNTERS[:-1]:
                setattr(total, name, getattr(total, name) + getattr(r, name))
            total.wall_time_ns = max(total.wall_time_ns, r.wall_time_ns)
            for prim, (count, ns) in r.primitives.items():
                c0, n0 = total.primitives.get(prim, (0, 0))
                total.primitives[prim] = (c0 + count, n0 + ns)
        return total


def export_counters(report: CounterReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["counter", "value"])
        writer.writerows(report.rows())


def load_counters(path: str | Path) -> CounterReport:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["counter", "value"]:
            raise ValueError(f"unexpected counter header {header}")
        return CounterReport.from_rows(reader)


class Stopwatch:
    def __init__(self) -> None:
        self.start = time.perf_counter_ns()

    def elapsed_ns(self) -> int:
        return max(1, time.perf_counter_ns() - self.start)
