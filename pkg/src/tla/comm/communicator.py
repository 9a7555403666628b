"""Per-locality endpoint: active messages, fusion buffers and collectives.

Every locality owns one :class:`Communicator`.  ``post`` enqueues an
envelope for a peer, ``recv`` returns a FutureCell for the next envelope
with a given ``(tag, src)``.  Collectives are built on those two calls and
return FutureCells immediately, so callers keep computing while the
reduction is in flight.
"""

from __future__ import annotations

import collections
import logging
import queue
import threading
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import (
    FrameError,
    MultipleRoots,
    NoRoot,
    ShapeMismatch,
    TagCollision,
    TransportDown,
)
from ..executor import FutureCell, when_all
from . import wire
from .wire import Envelope

log = logging.getLogger(__name__)

NAIVE_MAX_P = 8


@dataclass(frozen=True)
class FusionConfig:
    """Coalescing policy.  ``threshold_bytes == 0`` disables fusion."""

    threshold_bytes: int = 65536
    flush_interval: float = 0.002

    @property
    def enabled(self) -> bool:
        return self.threshold_bytes > 0


NO_FUSION = FusionConfig(threshold_bytes=0)


class FusionBuffer:
    """FIFO of envelopes waiting to be coalesced into one frame for ``dst``."""

    def __init__(self, dst: int, threshold_bytes: int, flush_interval: float):
        self.dst = dst
        self.threshold_bytes = threshold_bytes
        self.flush_interval = flush_interval
        self.pending: collections.deque[tuple[Envelope, FutureCell]] = collections.deque()
        self.pending_bytes = 0
        self.first_at: float | None = None
        self.lock = threading.RLock()

    def deadline(self) -> float | None:
        return None if self.first_at is None else self.first_at + self.flush_interval

    def take(self) -> list[tuple[Envelope, FutureCell]]:
        items = list(self.pending)
        self.pending.clear()
        self.pending_bytes = 0
        self.first_at = None
        return items


class CommCounters:
    FIELDS = ("envelopes_sent", "frames_sent", "bytes_sent", "collectives_completed")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.envelopes_sent = 0
        self.frames_sent = 0
        self.bytes_sent = 0
        self.collectives_completed = 0

    def add(self, **deltas: int) -> None:
        with self._lock:
            for k, v in deltas.items():
                setattr(self, k, getattr(self, k) + v)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {k: getattr(self, k) for k in self.FIELDS}


class _Mailbox:
    __slots__ = ("messages", "waiters")

    def __init__(self) -> None:
        self.messages: collections.deque[bytes] = collections.deque()
        self.waiters: collections.deque[FutureCell] = collections.deque()


def _reduce_in_order(parts: Sequence[np.ndarray], op: str) -> np.ndarray:
    shape = parts[0].shape
    for r, p in enumerate(parts):
        if p.shape != shape:
            raise ShapeMismatch(f"rank {r} contributed shape {p.shape}, rank 0 has {shape}")
    acc = np.array(parts[0], dtype=np.float64, copy=True)
    combine = np.add if op == "sum" else np.maximum
    for p in parts[1:]:
        acc = combine(acc, p)
    return acc


class Communicator:
    def __init__(self, transport, fusion: FusionConfig | None = None):
        self.transport = transport
        self.rank = transport.rank
        self.size = transport.world
        self.fusion = fusion or FusionConfig()
        self.counters = CommCounters()
        self._seq_out = [0] * self.size
        self._seq_in = [0] * self.size
        self._buffers = [
            FusionBuffer(d, self.fusion.threshold_bytes, self.fusion.flush_interval) for d in range(self.size)
        ]
        self._mail: dict[tuple[int, int], _Mailbox] = {}
        self._mail_lock = threading.Lock()
        self._tags: set[int] = set()
        self._tag_lock = threading.Lock()
        self._inbox: queue.Queue = queue.Queue()
        self._flush_cond = threading.Condition()
        self._closed = False
        # test hook: called with the frame type of every frame written to the wire
        self.on_frame = None
        transport.start(self._inbox)
        self._rx = threading.Thread(target=self._receive_loop, name=f"tla-rx-{self.rank}", daemon=True)
        self._rx.start()
        self._flusher = None
        if self.fusion.enabled:
            self._flusher = threading.Thread(target=self._flush_loop, name=f"tla-flush-{self.rank}", daemon=True)
            self._flusher.start()

    # -- point to point ----------------------------------------------------------

    def post(self, dst: int, tag: int, payload: bytes) -> FutureCell:
        """Send ``payload`` to ``dst``; the cell resolves once it left this locality."""
        if self._closed:
            raise TransportDown("communicator is closed")
        if not 0 <= dst < self.size:
            raise ValueError(f"destination {dst} outside world of {self.size}")
        ack = FutureCell()
        buf = self._buffers[dst]
        if dst == self.rank:
            with buf.lock:
                env = Envelope(self.rank, dst, tag, self._seq_out[dst], payload)
                self._seq_out[dst] += 1
                self.counters.add(envelopes_sent=1)
                self._dispatch(env)
            ack.set_result(True)
            return ack
        with buf.lock:
            env = Envelope(self.rank, dst, tag, self._seq_out[dst], payload)
            self._seq_out[dst] += 1
            self.counters.add(envelopes_sent=1)
            if not self.fusion.enabled or env.size >= self.fusion.threshold_bytes:
                self._flush_locked(buf)
                self._write([(env, ack)])
                return ack
            buf.pending.append((env, ack))
            buf.pending_bytes += env.size
            first = buf.first_at is None
            if first:
                buf.first_at = time.monotonic()
            if buf.pending_bytes >= self.fusion.threshold_bytes:
                self._flush_locked(buf)
                return ack
        if first:
            with self._flush_cond:
                self._flush_cond.notify()
        return ack

    def _write(self, items: list[tuple[Envelope, FutureCell]]) -> None:
        frame = wire.encode_frame([e for e, _ in items])
        try:
            self.transport.send(items[0][0].dst, frame)
        except Exception as exc:  # noqa: BLE001 - reported through the acks
            for _, ack in items:
                ack.set_error(exc)
            return
        self.counters.add(frames_sent=1, bytes_sent=len(frame))
        if self.on_frame is not None:
            self.on_frame(wire.SINGLE if len(items) == 1 else wire.FUSED)
        for _, ack in items:
            ack.set_result(True)

    def _flush_locked(self, buf: FusionBuffer) -> None:
        if buf.pending:
            self._write(buf.take())

    def flush(self, dst: int | None = None) -> None:
        """Emit pending envelopes (for one destination or all) as coalesced frames."""
        targets = self._buffers if dst is None else [self._buffers[dst]]
        for buf in targets:
            with buf.lock:
                self._flush_locked(buf)

    def _flush_loop(self) -> None:
        while True:
            with self._flush_cond:
                if self._closed:
                    return
                deadlines = [d for d in (b.deadline() for b in self._buffers) if d is not None]
                now = time.monotonic()
                if not deadlines:
                    self._flush_cond.wait()
                    continue
                soonest = min(deadlines)
                if soonest > now:
                    self._flush_cond.wait(soonest - now)
                    continue
            now = time.monotonic()
            for buf in self._buffers:
                with buf.lock:
                    d = buf.deadline()
                    if d is not None and d <= now:
                        self._flush_locked(buf)

    def recv(self, tag: int, src: int) -> FutureCell:
        """Cell resolving with the next payload from ``src`` carrying ``tag``."""
        key = (tag, src)
        with self._mail_lock:
            box = self._mail.get(key)
            if box is not None and box.messages:
                payload = box.messages.popleft()
                if not box.messages and not box.waiters:
                    del self._mail[key]
                return FutureCell.ready(payload)
            if box is None:
                box = self._mail[key] = _Mailbox()
            cell = FutureCell()
            box.waiters.append(cell)
            return cell

    def _dispatch(self, env: Envelope) -> None:
        key = (env.tag, env.src)
        with self._mail_lock:
            box = self._mail.get(key)
            if box is not None and box.waiters:
                cell = box.waiters.popleft()
                if not box.messages and not box.waiters:
                    del self._mail[key]
            else:
                if box is None:
                    box = self._mail[key] = _Mailbox()
                box.messages.append(env.payload)
                return
        cell.set_result(env.payload)

    def _receive_loop(self) -> None:
        while True:
            frame = self._inbox.get()
            if frame is None:
                return
            try:
                _, envs = wire.decode_frame(frame)
            except FrameError as exc:
                log.error("rank %d: bad frame: %s", self.rank, exc)
                continue
            for env in envs:
                expected = self._seq_in[env.src]
                if env.seq != expected:
                    log.error("rank %d: out-of-order envelope from %d (%d != %d)", self.rank, env.src, env.seq, expected)
                self._seq_in[env.src] = env.seq + 1
                self._dispatch(env)

    # -- collectives -------------------------------------------------------------

    def _claim(self, tag: int) -> None:
        with self._tag_lock:
            if tag in self._tags:
                raise TagCollision(f"tag {tag:#x} already used on rank {self.rank}")
            self._tags.add(tag)

    def _completed(self, cell: FutureCell) -> FutureCell:
        def count(c: FutureCell) -> None:
            if c.error() is None:
                self.counters.add(collectives_completed=1)

        cell.add_done_callback(count)
        return cell

    def _fan_out(self, tag: int, payload: bytes) -> None:
        for r in range(self.size):
            if r != self.rank:
                self.post(r, tag, payload)

    def all_reduce(self, local: np.ndarray, op: str = "sum", tag: int = 0) -> FutureCell:
        """Elementwise reduction over ranks ``0..P-1`` in rank order, result on every rank."""
        if op not in ("sum", "max"):
            raise ValueError(f"unsupported reduction {op!r}")
        self._claim(tag)
        local = np.asarray(local, dtype=np.float64)
        if self.size == 1:
            return self._completed(FutureCell.ready(local.copy()))
        if self.size <= NAIVE_MAX_P:
            return self._completed(self._gather_then_broadcast(local, tag, lambda parts: _reduce_in_order(parts, op)))
        return self._completed(self._ring_reduce(local, op, tag))

    def _gather_then_broadcast(self, local: np.ndarray, tag: int, combine) -> FutureCell:
        if self.rank != 0:
            self.post(0, tag, wire.encode_array(local))
            return self.recv(tag, 0).then(wire.decode_payload)

        def finish(payloads: list[bytes]) -> object:
            try:
                parts = [local] + [wire.decode_payload(p) for p in payloads]
                result = combine(parts)
            except Exception as exc:
                self._fan_out(tag, wire.encode_error(exc))
                raise
            if isinstance(result, list):
                self._fan_out(tag, wire.encode_arrays(result))
            else:
                self._fan_out(tag, wire.encode_array(result))
            return result

        return when_all([self.recv(tag, r) for r in range(1, self.size)]).then(finish)

    def _ring_reduce(self, local: np.ndarray, op: str, tag: int) -> FutureCell:
        # partial results travel 0 -> 1 -> ... -> P-1 (keeping rank order),
        # then the total travels P-1 -> 0 -> 1 -> ... -> P-2
        P, r = self.size, self.rank
        nxt = (r + 1) % P

        def forward(total: np.ndarray) -> np.ndarray:
            if nxt != P - 1:
                self.post(nxt, tag, wire.encode_array(total))
            return total

        if r == 0:
            self.post(1, tag, wire.encode_array(local))
            return self.recv(tag, P - 1).then(wire.decode_payload).then(forward)

        def accumulate(prev: np.ndarray) -> object:
            acc = _reduce_in_order([prev, local], op)
            if r == P - 1:
                self.post(0, tag, wire.encode_array(acc))
                return acc
            self.post(nxt, tag, wire.encode_array(acc))
            return self.recv(tag, r - 1).then(wire.decode_payload).then(forward)

        return self.recv(tag, r - 1).then(wire.decode_payload).then(accumulate)

    def all_gather(self, local: np.ndarray, tag: int = 0) -> FutureCell:
        """Every rank receives the list of all contributions in rank order."""
        self._claim(tag)
        local = np.asarray(local)
        if self.size == 1:
            return self._completed(FutureCell.ready([local.copy()]))
        return self._completed(self._gather_then_broadcast(local, tag, list))

    def broadcast(self, root: int, value: np.ndarray | None, tag: int = 0) -> FutureCell:
        """Every rank receives the root's array; only the root passes a value."""
        self._claim(tag)
        if not 0 <= root < self.size:
            raise ValueError(f"root {root} outside world of {self.size}")
        if self.rank == root:
            if value is None:
                err = NoRoot(f"root {root} supplied no value")
                self._fan_out(tag, wire.encode_error(err))
                return FutureCell.failed(err)
            value = np.asarray(value)
            self._fan_out(tag, wire.encode_array(value))
            return self._completed(FutureCell.ready(value.copy()))
        if value is not None:
            return FutureCell.failed(MultipleRoots(f"rank {self.rank} supplied a value but root is {root}"))
        return self._completed(self.recv(tag, root).then(wire.decode_payload))

    # -- lifecycle ------------------------------------------------------------------

    def close(self) -> None:
        if self._closed:
            return
        self.flush()
        with self._flush_cond:
            self._closed = True
            self._flush_cond.notify_all()
        self.transport.close()
        self._inbox.put(None)
        self._rx.join(timeout=5)

    def __enter__(self) -> "Communicator":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
