"""Futurized execution: single-assignment cells and a dependency-driven scheduler."""

from __future__ import annotations

import collections
import enum
import itertools
import logging
import math
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidStateError, SchedulerShutdown

log = logging.getLogger(__name__)

DEFAULT_GRAIN = 4096
CALIBRATION_GRAINS = (1024, 4096, 16384, 65536)


class CellState(enum.Enum):
    PENDING = "Pending"
    READY = "Ready"
    ERROR = "Error"


class FutureCell:
    """A write-once result slot.

    Continuations registered with :meth:`add_done_callback` fire exactly
    once, in the resolving thread, after the state leaves ``PENDING``.
    """

    __slots__ = ("_lock", "_state", "_value", "_event", "_callbacks")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._state = CellState.PENDING
        self._value: Any = None
        self._event = threading.Event()
        self._callbacks: list[Callable[[FutureCell], None]] = []

    @classmethod
    def ready(cls, value: Any) -> "FutureCell":
        cell = cls()
        cell.set_result(value)
        return cell

    @classmethod
    def failed(cls, error: BaseException) -> "FutureCell":
        cell = cls()
        cell.set_error(error)
        return cell

    @property
    def state(self) -> CellState:
        return self._state

    def done(self) -> bool:
        return self._state is not CellState.PENDING

    def _transition(self, state: CellState, value: Any) -> None:
        with self._lock:
            if self._state is not CellState.PENDING:
                raise InvalidStateError(f"cell already {self._state.value}")
            self._state = state
            self._value = value
            callbacks, self._callbacks = self._callbacks, []
        self._event.set()
        for cb in callbacks:
            cb(self)

    def set_result(self, value: Any) -> None:
        self._transition(CellState.READY, value)

    def set_error(self, error: BaseException) -> None:
        self._transition(CellState.ERROR, error)

    def resolve_from(self, other: "FutureCell") -> None:
        if other._state is CellState.ERROR:
            self.set_error(other._value)
        else:
            self.set_result(other._value)

    def add_done_callback(self, fn: Callable[["FutureCell"], None]) -> None:
        with self._lock:
            if self._state is CellState.PENDING:
                self._callbacks.append(fn)
                return
        fn(self)

    def value(self) -> Any:
        """Value of a READY cell (no waiting)."""
        if self._state is CellState.ERROR:
            raise self._value
        if self._state is CellState.PENDING:
            raise InvalidStateError("cell is still pending")
        return self._value

    def error(self) -> BaseException | None:
        return self._value if self._state is CellState.ERROR else None

    def result(self, timeout: float | None = None) -> Any:
        if not self._event.wait(timeout):
            raise TimeoutError("future not resolved in time")
        return self.value()

    def then(self, fn: Callable[[Any], Any]) -> "FutureCell":
        """Chain ``fn`` on the value; errors skip ``fn`` and propagate.

        If ``fn`` returns a FutureCell the chained cell follows it.
        """
        out = FutureCell()

        def fire(cell: FutureCell) -> None:
            if cell._state is CellState.ERROR:
                out.set_error(cell._value)
                return
            try:
                res = fn(cell._value)
            except BaseException as exc:  # noqa: BLE001 - captured into the cell
                out.set_error(exc)
                return
            if isinstance(res, FutureCell):
                res.add_done_callback(out.resolve_from)
            else:
                out.set_result(res)

        self.add_done_callback(fire)
        return out

    def __repr__(self) -> str:
        if self._state is CellState.PENDING:
            return "FutureCell(Pending)"
        return f"FutureCell({self._state.value}({self._value!r}))"


def when_all(cells: Sequence[FutureCell]) -> FutureCell:
    """Resolve with the list of values once every cell is done.

    If any input failed, the result carries the error of the lowest-index
    failing input; it still waits for all inputs to settle so the choice is
    deterministic.
    """
    cells = list(cells)
    out = FutureCell()
    if not cells:
        out.set_result([])
        return out
    remaining = [len(cells)]
    lock = threading.Lock()

    def on_done(_cell: FutureCell) -> None:
        with lock:
            remaining[0] -= 1
            last = remaining[0] == 0
        if not last:
            return
        for c in cells:
            if c._state is CellState.ERROR:
                out.set_error(c._value)
                return
        out.set_result([c._value for c in cells])

    for c in cells:
        c.add_done_callback(on_done)
    return out


@dataclass(frozen=True)
class SchedulerConfig:
    worker_threads: int = 1
    grain_threshold: int = DEFAULT_GRAIN

    def __post_init__(self) -> None:
        if self.worker_threads < 1:
            raise ValueError("worker_threads must be positive")
        if self.grain_threshold < 1:
            raise ValueError("grain_threshold must be >= 1")


def split_by_grain(work_size: int, cfg: SchedulerConfig | int) -> list[tuple[int, int]]:
    """Partition ``[0, work_size)`` into ranges of ``grain_threshold`` elements.

    >>> split_by_grain(10, 4)
    [(0, 4), (4, 8), (8, 10)]
    """
    grain = cfg if isinstance(cfg, int) else cfg.grain_threshold
    if work_size < 0:
        raise ValueError("work_size must be non-negative")
    if grain < 1:
        raise ValueError("grain_threshold must be >= 1")
    return [(lo, min(lo + grain, work_size)) for lo in range(0, work_size, grain)]


class Scheduler:
    """Pooled work-queue scheduler.

    Tasks never block a worker: a task that must wait for another cell
    should return that cell instead.  :meth:`wait` called from inside a
    worker runs queued tasks while it waits, so nested blocking is still
    deadlock free on one thread.
    """

    _ids = itertools.count()

    def __init__(self, config: SchedulerConfig | None = None, name: str = "sched"):
        self.config = config or SchedulerConfig()
        self.name = name
        self._queue: collections.deque[Callable[[], None]] = collections.deque()
        self._cond = threading.Condition()
        self._closing = False
        self._local = threading.local()
        self._task_ids = itertools.count()
        self.tasks_spawned = 0
        # test instrumentation: called with (task_id, deps) right before a body runs
        self.on_task_start: Callable[[int, list[FutureCell]], None] | None = None
        self._threads = [
            threading.Thread(target=self._worker, name=f"{name}-w{i}", daemon=True)
            for i in range(self.config.worker_threads)
        ]
        for t in self._threads:
            t.start()

    def __enter__(self) -> "Scheduler":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    def _worker(self) -> None:
        self._local.worker = True
        while True:
            with self._cond:
                while not self._queue and not self._closing:
                    self._cond.wait()
                if not self._queue:
                    return
                job = self._queue.popleft()
            job()

    def submit(self, job: Callable[[], None]) -> None:
        with self._cond:
            if self._closing:
                raise SchedulerShutdown(f"{self.name} is shutting down")
            self._queue.append(job)
            self._cond.notify()

    def _try_run_one(self) -> bool:
        with self._cond:
            if not self._queue:
                return False
            job = self._queue.popleft()
        job()
        return True

    def in_worker(self) -> bool:
        return getattr(self._local, "worker", False)

    def wait(self, cell: FutureCell, timeout: float | None = None) -> Any:
        if not self.in_worker():
            return cell.result(timeout)
        deadline = None if timeout is None else time.monotonic() + timeout
        while not cell.done():
            if not self._try_run_one():
                cell._event.wait(0.001)
            if deadline is not None and time.monotonic() > deadline:
                raise TimeoutError("future not resolved in time")
        return cell.value()

    def spawn(self, body: Callable[..., Any], deps: Iterable[FutureCell] = ()) -> FutureCell:
        """Run ``body(*dep_values)`` once all deps are ready.

        Returns immediately.  If a dependency failed the body is skipped and
        the result carries that error.  A body returning a FutureCell
        resolves the result when that cell does.
        """
        deps = list(deps)
        with self._cond:
            if self._closing:
                raise SchedulerShutdown(f"{self.name} is shutting down")
            self.tasks_spawned += 1
        task_id = next(self._task_ids)
        result = FutureCell()

        def run(values: list) -> None:
            hook = self.on_task_start
            if hook is not None:
                hook(task_id, deps)
            try:
                res = body(*values)
            except BaseException as exc:  # noqa: BLE001 - captured into the cell
                result.set_error(exc)
                return
            if isinstance(res, FutureCell):
                res.add_done_callback(result.resolve_from)
            else:
                result.set_result(res)

        def release(joined: FutureCell) -> None:
            if joined._state is CellState.ERROR:
                result.set_error(joined._value)
                return
            try:
                self.submit(lambda: run(joined._value))
            except SchedulerShutdown as exc:
                result.set_error(exc)

        when_all(deps).add_done_callback(release)
        return result

    def shutdown(self, wait: bool = True) -> None:
        with self._cond:
            self._closing = True
            self._cond.notify_all()
        if wait:
            for t in self._threads:
                if t is not threading.current_thread():
                    t.join()


# -- deterministic reductions ---------------------------------------------------

REDUCE_BLOCK = 1024


def pairwise_combine(parts: Sequence[Any], op: Callable[[Any, Any], Any]) -> Any:
    """Combine ``parts`` with a fixed balanced tree (adjacent pairs, odd tail carried)."""
    level = list(parts)
    if not level:
        raise ValueError("nothing to combine")
    while len(level) > 1:
        nxt = [op(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


REDUCERS = {"sum": np.add, "max": np.maximum, "min": np.minimum}


def _reducer(kind: str) -> np.ufunc:
    try:
        return REDUCERS[kind]
    except KeyError:
        raise ValueError(f"unknown reduction {kind!r}") from None


def block_partials(flat: np.ndarray, lo_block: int, hi_block: int, kind: str = "sum") -> np.ndarray:
    """Per-block reductions for blocks ``[lo_block, hi_block)`` of ``flat``."""
    out = np.empty(hi_block - lo_block)
    reducer = _reducer(kind).reduce
    for k, b in enumerate(range(lo_block, hi_block)):
        out[k] = reducer(flat[b * REDUCE_BLOCK : (b + 1) * REDUCE_BLOCK])
    return out


def reduce_async(x: np.ndarray, sched: Scheduler, kind: str = "sum") -> FutureCell:
    """Grain-parallel reduction whose result does not depend on the grain.

    The array is cut into fixed blocks of ``REDUCE_BLOCK`` elements; subtasks
    own whole blocks, and the block partials are merged with
    :func:`pairwise_combine` in block order.
    """
    combine = _reducer(kind)
    flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    if flat.size == 0:
        if kind == "sum":
            return FutureCell.ready(0.0)
        return FutureCell.failed(ValueError(f"{kind} of an empty array"))
    nblocks = math.ceil(flat.size / REDUCE_BLOCK)
    per_task = max(1, math.ceil(sched.config.grain_threshold / REDUCE_BLOCK))
    cells = [
        sched.spawn(lambda lo=lo, hi=hi: block_partials(flat, lo, hi, kind))
        for lo, hi in split_by_grain(nblocks, per_task)
    ]
    return when_all(cells).then(lambda parts: float(pairwise_combine(np.concatenate(parts), combine)))


def map_async(fn: Callable[..., np.ndarray], arrays: Sequence[np.ndarray], sched: Scheduler) -> FutureCell:
    """Elementwise ``fn`` over same-shaped arrays, split into grain-sized subtasks."""
    shape = arrays[0].shape
    flats = [np.ascontiguousarray(a, dtype=np.float64).ravel() for a in arrays]
    ranges = split_by_grain(flats[0].size, sched.config)
    if len(ranges) <= 1:
        return FutureCell.ready(fn(*arrays))
    cells = [sched.spawn(lambda lo=lo, hi=hi: fn(*(f[lo:hi] for f in flats))) for lo, hi in ranges]
    return when_all(cells).then(lambda parts: np.concatenate(parts).reshape(shape))


def calibrate_grain(worker_threads: int = 1, size: int = 1 << 18, grains: Sequence[int] = CALIBRATION_GRAINS) -> int:
    """Time one elementwise kernel at each candidate grain and return the fastest."""
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(size), rng.standard_normal(size)
    best, best_t = grains[0], math.inf
    for g in grains:
        with Scheduler(SchedulerConfig(worker_threads, g), name="calib") as sched:
            map_async(np.add, [a, b], sched).result()  # warm-up
            t0 = time.perf_counter()
            for _ in range(3):
                map_async(np.multiply, [a, b], sched).result()
            elapsed = time.perf_counter() - t0
        log.debug("grain %d: %.6fs", g, elapsed)
        if elapsed < best_t:
            best, best_t = g, elapsed
    return best
