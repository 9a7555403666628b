"""Evaluating execution trees on a locality.

:func:`evaluate` turns every reachable node into a task on the locality's
scheduler; edges become FutureCell dependencies.  Nodes are shared, so a
``define``'d expression runs once however many times it is used.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from .arrays import DistArray
from .counters import PrimitiveCounters
from .errors import EvaluationError
from .executor import FutureCell, Scheduler
from .frontend import ExecutionTree, Node
from .resilience import CorruptionInjector, FaultPolicy, Replay, fnv1a64


@dataclass(frozen=True)
class Primitive:
    name: str
    fn: Callable[..., Any]
    min_arity: int
    max_arity: int | None  # None: variadic
    collective: bool = False
    lazy: bool = False

    def accepts(self, n: int) -> bool:
        return n >= self.min_arity and (self.max_arity is None or n <= self.max_arity)

    def arity_text(self) -> str:
        if self.max_arity is None:
            return f"at least {self.min_arity}"
        if self.max_arity == self.min_arity:
            return str(self.min_arity)
        return f"{self.min_arity}-{self.max_arity}"


@dataclass
class RuntimeEnv:
    """Everything a primitive may touch on its locality."""

    registry: dict[str, Primitive]
    sched: Scheduler
    comm: Any  # Communicator
    seed: int = 0
    policy: FaultPolicy = field(default_factory=Replay)
    injector: CorruptionInjector | None = None
    counters: PrimitiveCounters = field(default_factory=PrimitiveCounters)
    scope: str = ""  # distinguishes re-executions, for collective tags
    stream: str = ""  # stable across re-executions, for random streams

    @property
    def rank(self) -> int:
        return self.comm.rank

    @property
    def size(self) -> int:
        return self.comm.size


@dataclass(frozen=True)
class CallContext:
    env: RuntimeEnv
    node: Node

    @property
    def tag(self) -> int:
        """Collective tag: identical on every locality for the same node and scope."""
        return fnv1a64(f"{self.env.scope}/{self.node.id}".encode())

    def subtag(self, k: int) -> int:
        return fnv1a64(f"{self.env.scope}/{self.node.id}/{k}".encode())


def _wrap(node: Node, exc: BaseException) -> BaseException:
    if isinstance(exc, EvaluationError):
        return exc
    return EvaluationError(node.id, node.op, exc, node.line, node.col)


def _reachable(root: Node) -> list[Node]:
    """Nodes evaluated eagerly from ``root`` (children of lazy nodes excluded), children first."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        if node.kind != "lazy":
            for child in reversed(node.children):
                if child.id not in seen:
                    stack.append((child, False))
    return order


def evaluate_node(root: Node, env: RuntimeEnv) -> FutureCell:
    cells: dict[int, FutureCell] = {}
    for node in _reachable(root):
        cells[node.id] = _spawn_node(node, env, [cells[c.id] for c in node.children] if node.kind != "lazy" else [])
    return cells[root.id]


def evaluate(tree: ExecutionTree, env: RuntimeEnv) -> FutureCell:
    """Spawn one task per node; the returned cell carries the program value."""
    return evaluate_node(tree.root, env)


def _spawn_node(node: Node, env: RuntimeEnv, deps: list[FutureCell]) -> FutureCell:
    if node.kind == "lit":
        return FutureCell.ready(node.value)
    if node.kind == "block":
        if not deps:
            return FutureCell.ready(None)
        return env.sched.spawn(lambda *vals: vals[-1] if vals else None, deps)

    prim = env.registry[node.op]
    ctx = CallContext(env, node)

    def body(*vals: Any) -> Any:
        t0 = time.perf_counter_ns()
        try:
            if node.kind == "lazy":
                thunks = [_thunk(child, env, node, i) for i, child in enumerate(node.children)]
                res = prim.fn(ctx, *thunks)
            else:
                res = prim.fn(ctx, *vals)
        except BaseException as exc:  # noqa: BLE001 - attributed to the node
            raise _wrap(node, exc) from exc
        finally:
            env.counters.record(node.op, time.perf_counter_ns() - t0)
        if isinstance(res, FutureCell):
            out = FutureCell()

            def relay(cell: FutureCell) -> None:
                err = cell.error()
                if err is not None:
                    out.set_error(_wrap(node, err))
                else:
                    out.set_result(cell.value())

            res.add_done_callback(relay)
            return out
        return res

    return env.sched.spawn(body, deps)


def _thunk(child: Node, env: RuntimeEnv, parent: Node, index: int) -> Callable[[], Any]:
    """Evaluate ``child`` afresh each call, in a scope of its own."""
    counter = [0]

    def run() -> Any:
        counter[0] += 1
        sub = replace(
            env,
            scope=f"{env.scope}/{parent.id}.{index}.{counter[0]}",
            stream=f"{env.stream}/{parent.id}.{index}",
        )
        return env.sched.wait(evaluate_node(child, sub))

    return run


# -- value formatting -------------------------------------------------------------------


def _fmt_scalar(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def format_value(value: Any) -> str:
    """Deterministic text rendering of a program value."""
    if value is None:
        return "nil"
    if isinstance(value, str):
        return value
    if isinstance(value, DistArray):
        core = value.core()
        return f"<dist {value.meta.array_name} gen={value.meta.generation} core={core.shape} of {value.meta.global_shape.dims}>"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    arr = np.asarray(value)
    if arr.ndim == 0:
        return _fmt_scalar(arr)
    return format_value(list(arr))
