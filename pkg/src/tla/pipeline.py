"""Slot-table simulation of pipelined training schedules.

Every forward and backward step of one microbatch on one stage costs one
time slot.  ``naive`` runs microbatches one after the other through all
stages; ``interleaved`` pipelines all forwards (fill/drain) and then all
backwards.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

IDLE = None
POLICIES = ("naive", "interleaved")


@dataclass(frozen=True)
class Activity:
    phase: str  # "F" or "B"
    microbatch: int

    def __str__(self) -> str:
        return f"{self.phase}{self.microbatch}"


@dataclass(frozen=True)
class PipelineSchedule:
    stages: int
    microbatches: int
    policy: str
    table: tuple[tuple[Activity | None, ...], ...]  # table[slot][stage]

    @property
    def total_slots(self) -> int:
        return len(self.table)

    @property
    def busy_slots(self) -> int:
        return sum(a is not None for row in self.table for a in row)

    @property
    def bubble_fraction(self) -> Fraction:
        cells = self.stages * self.total_slots
        return Fraction(cells - self.busy_slots, cells)

    @property
    def active_fraction(self) -> Fraction:
        return 1 - self.bubble_fraction

    def render(self) -> str:
        width = max(3, len(str(self.microbatches)) + 2)
        lines = []
        for s in range(self.stages):
            cells = [str(row[s]) if row[s] is not None else "." for row in self.table]
            lines.append(f"stage {s}: " + " ".join(c.rjust(width) for c in cells))
        return "\n".join(lines)


def pipeline_schedule(stages: int, microbatches: int, policy: str = "interleaved") -> PipelineSchedule:
    if stages < 1 or microbatches < 1:
        raise ValueError("need at least one stage and one microbatch")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    S, M = stages, microbatches
    rows: list[list[Activity | None]] = []
    if policy == "naive":
        for m in range(M):
            for s in range(S):
                row = [IDLE] * S
                row[s] = Activity("F", m)
                rows.append(row)
            for s in reversed(range(S)):
                row = [IDLE] * S
                row[s] = Activity("B", m)
                rows.append(row)
    else:
        span = M + S - 1
        for t in range(span):
            rows.append([Activity("F", t - s) if 0 <= t - s < M else IDLE for s in range(S)])
        for t in range(span):
            rows.append([Activity("B", t - (S - 1 - s)) if 0 <= t - (S - 1 - s) < M else IDLE for s in range(S)])
    return PipelineSchedule(S, M, policy, tuple(tuple(r) for r in rows))


def verify_schedule(sched: PipelineSchedule) -> list[str]:
    """Return every precedence violation found (empty when valid)."""
    S, M = sched.stages, sched.microbatches
    when: dict[tuple[str, int, int], int] = {}
    problems = []
    for t, row in enumerate(sched.table):
        if len(row) != S:
            problems.append(f"slot {t} has {len(row)} stages")
        for s, act in enumerate(row):
            if act is None:
                continue
            key = (act.phase, act.microbatch, s)
            if key in when:
                problems.append(f"{act} on stage {s} scheduled twice")
            when[key] = t
    for m in range(M):
        for s in range(S):
            for phase in "FB":
                if (phase, m, s) not in when:
                    problems.append(f"{phase}{m} missing on stage {s}")
        if problems:
            continue
        for s in range(S - 1):
            if not when["F", m, s] < when["F", m, s + 1]:
                problems.append(f"F{m} reaches stage {s + 1} before stage {s}")
            if not when["B", m, s + 1] < when["B", m, s]:
                problems.append(f"B{m} reaches stage {s} before stage {s + 1}")
        last_fwd = max(when["F", m, s] for s in range(S))
        first_bwd = min(when["B", m, s] for s in range(S))
        if not last_fwd < first_bwd:
            problems.append(f"B{m} starts before every F{m} finished")
    return problems

