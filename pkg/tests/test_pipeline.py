from fractions import Fraction

import pytest

from tla.pipeline import Activity, PipelineSchedule, pipeline_schedule, verify_schedule


def test_interleaved_example_s4_m8():
    sched = pipeline_schedule(4, 8, "interleaved")
    assert sched.total_slots == 22
    assert sched.bubble_fraction == Fraction(3, 11)
    assert sched.table[0] == (Activity("F", 0), None, None, None)
    assert sched.table[3] == (Activity("F", 3), Activity("F", 2), Activity("F", 1), Activity("F", 0))


def test_naive_example_s3_m2():
    sched = pipeline_schedule(3, 2, "naive")
    assert sched.total_slots == 12
    assert sched.active_fraction == Fraction(1, 3)
    assert all(sum(a is not None for a in row) == 1 for row in sched.table)


@pytest.mark.parametrize("S", range(1, 9))
def test_formulas_hold_for_all_small_shapes(S):
    for M in range(1, 33):
        inter = pipeline_schedule(S, M, "interleaved")
        naive = pipeline_schedule(S, M, "naive")
        assert inter.bubble_fraction == Fraction(S - 1, M + S - 1)
        assert inter.total_slots == 2 * (M + S - 1)
        assert naive.active_fraction == Fraction(1, S)
        assert naive.total_slots == 2 * M * S
        assert verify_schedule(inter) == [] and verify_schedule(naive) == []


def test_verifier_catches_reordered_work():
    good = pipeline_schedule(2, 2, "interleaved")
    rows = list(good.table)
    rows[0], rows[1] = rows[1], rows[0]
    assert verify_schedule(PipelineSchedule(2, 2, "interleaved", tuple(rows)))
    assert verify_schedule(PipelineSchedule(2, 2, "interleaved", good.table[:-1]))


def test_bad_arguments():
    with pytest.raises(ValueError):
        pipeline_schedule(0, 3)
    with pytest.raises(ValueError):
        pipeline_schedule(2, 3, "1f1b")


def test_render_marks_idle_slots():
    text = pipeline_schedule(2, 1, "interleaved").render()
    assert text.splitlines() == ["stage 0:  F0   .   .  B0", "stage 1:   .  F0  B0   ."]
