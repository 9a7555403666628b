"""Hosting a set of localities.

:func:`run_localities` runs the same function SPMD-style on P localities
inside this process (one thread each) and returns the per-rank results.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Callable

from .comm import Communicator, FusionConfig, InprocHub, SocketTransport, free_ports
from .executor import Scheduler, SchedulerConfig

TRANSPORTS = ("inproc", "socket")


@dataclass
class Locality:
    rank: int
    size: int
    comm: Communicator
    sched: Scheduler

    def close(self) -> None:
        self.comm.close()
        self.sched.shutdown()


def make_transports(world: int, transport: str = "inproc", ports: list[int] | None = None) -> list:
    if transport == "inproc":
        hub = InprocHub(world)
        return [hub.transport(r) for r in range(world)]
    if transport == "socket":
        ports = ports or free_ports(world)
        return [SocketTransport(r, world, ports) for r in range(world)]
    raise ValueError(f"unknown transport {transport!r}; expected one of {TRANSPORTS}")


def open_locality(transport, fusion: FusionConfig | None = None, sched_config: SchedulerConfig | None = None) -> Locality:
    comm = Communicator(transport, fusion)
    sched = Scheduler(sched_config, name=f"loc{transport.rank}")
    return Locality(transport.rank, transport.world, comm, sched)


def run_localities(
    world: int,
    fn: Callable[[Locality], Any],
    *,
    transport: str = "inproc",
    fusion: FusionConfig | None = None,
    sched_config: SchedulerConfig | None = None,
    timeout: float | None = 120.0,
) -> list[Any]:
    """Run ``fn(locality)`` on every rank concurrently; re-raise the lowest-rank failure."""
    localities = [open_locality(t, fusion, sched_config) for t in make_transports(world, transport)]
    results: list[Any] = [None] * world
    errors: list[BaseException | None] = [None] * world

    def body(loc: Locality) -> None:
        try:
            results[loc.rank] = fn(loc)
        except BaseException as exc:  # noqa: BLE001 - re-raised below
            errors[loc.rank] = exc

    threads = [threading.Thread(target=body, args=(loc,), name=f"locality-{loc.rank}") for loc in localities]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    hung = [i for i, t in enumerate(threads) if t.is_alive()]
    for loc in localities:
        loc.comm.close()
        loc.sched.shutdown(wait=False)
    if hung:
        raise TimeoutError(f"localities {hung} did not finish within {timeout}s")
    for exc in errors:
        if exc is not None:
            raise exc
    return results
