"""Running a script on one or many localities."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .comm import FusionConfig
from .counters import CounterReport, PrimitiveCounters
from .executor import SchedulerConfig
from .frontend import compile_text
from .job import Locality, run_localities
from .primitives import default_registry
from .resilience import CorruptionInjector, FaultPolicy, Replay
from .runtime import RuntimeEnv, evaluate

MERGE_TAG = 0xC0C0_0000_0000_0001


@dataclass
class RunConfig:
    script: str | Path | None = None
    localities: int = 1
    transport: str = "inproc"
    worker_threads: int = 1
    grain_threshold: int = 4096
    fusion_bytes: int = 65536
    fusion_ms: float = 2.0
    seed: int = 0
    resilience: FaultPolicy = field(default_factory=Replay)
    counters_path: str | Path | None = None
    timeout: float = 600.0

    def __post_init__(self) -> None:
        if self.localities < 1:
            raise ValueError("need at least one locality")

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(self.fusion_bytes, self.fusion_ms / 1000.0)

    @property
    def sched_config(self) -> SchedulerConfig:
        return SchedulerConfig(self.worker_threads, self.grain_threshold)


@dataclass
class LocalityResult:
    value: Any
    report: CounterReport


def run_on_locality(
    source: str,
    loc: Locality,
    *,
    seed: int = 0,
    policy: FaultPolicy | None = None,
    injector: CorruptionInjector | None = None,
    timeout: float | None = 600.0,
    merge_counters: bool = True,
) -> LocalityResult:
    """Compile and evaluate ``source`` on this locality (collective over all of them).

    With ``merge_counters`` rank 0's report is the merged report of the job.
    """
    start = time.perf_counter_ns()
    prims = PrimitiveCounters()
    registry = default_registry()
    tree = compile_text(source, registry)
    env = RuntimeEnv(registry, loc.sched, loc.comm, seed, policy or Replay(), injector, prims)
    value = loc.sched.wait(evaluate(tree, env), timeout)
    loc.comm.flush()  # count envelopes still waiting in the coalescing buffers
    report = CounterReport(
        tasks_spawned=loc.sched.tasks_spawned,
        wall_time_ns=max(1, time.perf_counter_ns() - start),
        primitives=prims.snapshot(),
        **loc.comm.counters.snapshot(),
    )
    if merge_counters and loc.size > 1:
        report = merge_reports(report, loc, timeout)
    return LocalityResult(value, report)


def merge_reports(report: CounterReport, loc: Locality, timeout: float | None) -> CounterReport:
    blob = np.frombuffer(json.dumps(report.rows()).encode(), dtype=np.uint8)
    parts = loc.comm.all_gather(blob, tag=MERGE_TAG).result(timeout)
    return CounterReport.merge([CounterReport.from_rows(json.loads(p.tobytes())) for p in parts])


def run_script_text(source: str, cfg: RunConfig, injector: CorruptionInjector | None = None) -> LocalityResult:
    """Run ``source`` on ``cfg.localities`` in-process localities; rank 0's result."""
    results = run_localities(
        cfg.localities,
        lambda loc: run_on_locality(source, loc, seed=cfg.seed, policy=cfg.resilience, injector=injector, timeout=cfg.timeout),
        transport=cfg.transport,
        fusion=cfg.fusion,
        sched_config=cfg.sched_config,
        timeout=cfg.timeout,
    )
    return results[0]
