"""Replay and replicate execution guarding against silent data corruption.

A task is a zero-argument callable returning an array or scalar.  Replay
re-runs it until a detector accepts the result; replicate runs it several
times and chooses among the results by checksum vote, a consensus
predicate, or a validate selector.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import ResilienceExhausted

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


def canonical_bytes(value: Any) -> bytes:
    """``ndim`` then each dim as u64, then elements as f64, all little-endian."""
    arr = np.asarray(value, dtype=np.float64)
    head = struct.pack(f"<Q{arr.ndim}Q", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def checksum(value: Any) -> int:
    """64-bit FNV-1a digest of a scalar or array."""
    return fnv1a64(canonical_bytes(value))


def checksum_rows(rows: np.ndarray) -> np.ndarray:
    """FNV-1a over each row of a uint8 matrix, vectorized across rows."""
    rows = np.ascontiguousarray(rows, dtype=np.uint8)
    h = np.full(rows.shape[0], FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    for j in range(rows.shape[1]):
        h ^= rows[:, j].astype(np.uint64)
        h *= prime  # wraps modulo 2**64
    return h


def checksum_many(values: np.ndarray) -> np.ndarray:
    """:func:`checksum` of every ``values[i]`` (same shape), vectorized."""
    values = np.asarray(values, dtype=np.float64)
    one = values[0]
    head = np.frombuffer(struct.pack(f"<Q{one.ndim}Q", one.ndim, *one.shape), dtype=np.uint8)
    body = np.ascontiguousarray(values, dtype="<f8").reshape(values.shape[0], -1).view(np.uint8)
    rows = np.concatenate([np.broadcast_to(head, (values.shape[0], head.size)), body], axis=1)
    return checksum_rows(rows)


# -- corruption ----------------------------------------------------------------------------


class CorruptionInjector:
    """Test hook that flips the sign bit of one element with a given probability.

    ``schedule`` (an iterable of booleans) overrides the random decision,
    one entry per execution.
    """

    def __init__(self, probability: float = 0.0, seed: int = 0, schedule: Iterable[bool] | None = None):
        if not 0.0 <= probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")
        self.probability = probability
        self.rng = np.random.default_rng(seed)
        self._schedule = iter(schedule) if schedule is not None else None
        self.executions = 0
        self.corruptions = 0

    @property
    def active(self) -> bool:
        return self._schedule is not None or self.probability > 0.0

    def __call__(self, value: Any) -> Any:
        self.executions += 1
        if self._schedule is not None:
            hit = next(self._schedule)
        else:
            hit = self.probability > 0.0 and self.rng.random() < self.probability
        if not hit:
            return value
        self.corruptions += 1
        arr = np.array(value, dtype=np.float64, copy=True)
        flat = arr.reshape(-1)
        i = int(self.rng.integers(flat.size))
        bits = flat[i : i + 1].view(np.uint64)
        bits ^= np.uint64(1 << 63)
        return arr if np.ndim(value) else float(arr)


# -- policies --------------------------------------------------------------------------------


@dataclass(frozen=True)
class Checksum:
    pass


@dataclass(frozen=True)
class Consensus:
    predicate: Callable[[Any], bool]


@dataclass(frozen=True)
class Validate:
    predicate: Callable[[Any], bool]
    selector: Callable[[list], Any]


Comparator = Checksum | Consensus | Validate


@dataclass(frozen=True)
class Replay:
    max_attempts: int = 1
    detector: Callable[[Any], bool] | None = None  # True means "looks corrupted"

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class Replicate:
    k: int = 3
    comparator: Comparator = Checksum()

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValueError("replicate needs k >= 2")


FaultPolicy = Replay | Replicate

_POLICY_RE = re.compile(r"replay:(\d+)|replicate:(\d+):checksum")


def parse_policy(text: str) -> FaultPolicy:
    """Parse ``replay:N`` or ``replicate:K:checksum``."""
    m = _POLICY_RE.fullmatch(text.strip())
    if not m:
        raise ValueError(f"bad resilience policy {text!r}; expected replay:N or replicate:K:checksum")
    if m.group(1):
        return Replay(int(m.group(1)))
    return Replicate(int(m.group(2)), Checksum())


def format_policy(policy: FaultPolicy) -> str:
    if isinstance(policy, Replay):
        return f"replay:{policy.max_attempts}"
    return f"replicate:{policy.k}:checksum"


def run_resilient(
    task: Callable[[], Any],
    policy: FaultPolicy,
    injector: CorruptionInjector | None = None,
    run_replicates: Callable[[list[Callable[[], Any]]], list[Any]] | None = None,
) -> Any:
    """Execute ``task`` under ``policy``.

    With no active injector and no detector, ``Replay`` runs the task once.
    Otherwise each replay attempt is checked by the detector, or when none is
    given, by comparing the checksum against a second execution.
    ``run_replicates`` may execute replicate thunks concurrently; the default
    runs them in order.
    """

    def execute() -> Any:
        value = task()
        return injector(value) if injector is not None else value

    if isinstance(policy, Replay):
        corrupt = injector is not None and injector.active
        if policy.detector is None and not corrupt:
            return task()
        for _ in range(policy.max_attempts):
            value = execute()
            if policy.detector is not None:
                if not policy.detector(value):
                    return value
            elif checksum(value) == checksum(execute()):
                return value
        raise ResilienceExhausted(f"corruption persisted through {policy.max_attempts} attempts")

    thunks = [execute] * policy.k
    results = run_replicates(thunks) if run_replicates else [t() for t in thunks]
    return choose_replicate(results, policy.comparator)


def choose_replicate(results: Sequence[Any], comparator: Comparator) -> Any:
    if isinstance(comparator, Checksum):
        groups: dict[int, list[int]] = {}
        for i, r in enumerate(results):
            groups.setdefault(checksum(r), []).append(i)
        best = max(groups.values(), key=lambda g: (len(g), -g[0]))
        if len(best) < 2:
            raise ResilienceExhausted("no two replicates agree")
        return results[best[0]]
    if isinstance(comparator, Consensus):
        for r in results:
            if comparator.predicate(r):
                return r
        raise ResilienceExhausted("no replicate passed the consensus function")
    if isinstance(comparator, Validate):
        passing = [r for r in results if comparator.predicate(r)]
        if not passing:
            raise ResilienceExhausted("no replicate passed the consensus function")
        return comparator.selector(passing)
    raise TypeError(f"unknown comparator {comparator!r}")
