"""Forward-pass scaling harness.

For each locality count P the batch is tiled on the sample axis, every
locality runs the forward pass on its tile, and the per-tile losses are
all-reduced.  Only that region is timed; data generation and setup are not.
The first iteration is a warm-up and is discarded.
"""

from __future__ import annotations

import csv
import io
import os
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import dl
from .arrays import local_span, make_meta
from .comm import FusionConfig
from .executor import SchedulerConfig
from .job import Locality, run_localities

BENCH_TAG = 0xBE7C_0000_0000_0000


@dataclass(frozen=True)
class BenchModel:
    name: str
    build: Callable[[int], dl.ModelSpec]
    channels: int
    length: int
    classes: int


BENCH_MODELS = {
    "cnn4": BenchModel("cnn4", lambda seed: dl.reference_cnn4(seed), 9, 128, 6),
    "tiny": BenchModel(
        "tiny",
        lambda seed: dl.ModelSpec(
            (
                dl.conv_layer(np.random.default_rng(seed), 9, 4, 3),
                dl.LayerSpec("relu"),
                dl.LayerSpec("flatten"),
                dl.dense_layer(np.random.default_rng(seed + 1), 4 * 14, 6),
            )
        ),
        9,
        16,
        6,
    ),
}


@dataclass(frozen=True)
class ScalingRow:
    localities: int
    mean_seconds: float
    std_seconds: float
    loss: float


def physical_cores() -> int:
    """Best-effort physical core count (falls back to logical CPUs)."""
    try:
        pairs = set()
        phys = core = None
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("physical id"):
                    phys = line.split(":")[1].strip()
                elif line.startswith("core id"):
                    core = line.split(":")[1].strip()
                    pairs.add((phys, core))
        if pairs:
            return len(pairs)
    except OSError:
        pass
    return os.cpu_count() or 1


def _barrier(loc: Locality, tag: int) -> None:
    loc.comm.all_reduce(np.zeros(1), "sum", tag=tag).result(600)


def bench_scaling(
    model: str = "cnn4",
    batch: int = 8000,
    plist: Sequence[int] = (1, 2, 4, 8),
    repeats: int = 5,
    seed: int = 0,
    threads: int | None = None,
    grain: int = 4096,
    fusion: FusionConfig | None = None,
) -> list[ScalingRow]:
    if repeats < 3:
        raise ValueError("need at least 3 repeats")
    spec = BENCH_MODELS[model]
    net = spec.build(seed)
    x, labels = dl.synthetic_har(batch, seed=seed, channels=spec.channels, length=spec.length, classes=spec.classes)
    rows = []
    for P in plist:
        meta = make_meta("bench", x.shape, P, 0, 0)
        workers = threads or max(1, (os.cpu_count() or 1) // P)

        def run(loc: Locality) -> tuple[list[float], float]:
            span = local_span(meta, loc.rank)
            xs, ys = x[span.begin : span.end], labels[span.begin : span.end]
            times, loss = [], 0.0
            for it in range(repeats + 1):
                _barrier(loc, BENCH_TAG + 2 * it)
                t0 = time.perf_counter()
                local = dl.forward_pass_parallel(net, xs, ys, loc.sched, reduction="sum")
                total = loc.comm.all_reduce(np.array([local]), "sum", tag=BENCH_TAG + 2 * it + 1).result(600)
                times.append(time.perf_counter() - t0)
                loss = float(total[0]) / batch
            return times[1:], loss

        per_rank = run_localities(P, run, fusion=fusion, sched_config=SchedulerConfig(workers, grain), timeout=None)
        # a step ends when the slowest locality has the reduced loss
        steps = [max(r[0][i] for r in per_rank) for i in range(repeats)]
        rows.append(ScalingRow(P, statistics.fmean(steps), statistics.stdev(steps), per_rank[0][1]))
    return rows


CSV_HEADER = ["localities", "mean_seconds", "std_seconds", "loss"]


def rows_to_csv(rows: Sequence[ScalingRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r.localities, repr(r.mean_seconds), repr(r.std_seconds), repr(r.loss)])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[ScalingRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != CSV_HEADER:
        raise ValueError(f"unexpected header {header}")
    return [ScalingRow(int(p), float(m), float(s), float(l)) for p, m, s, l in reader]
