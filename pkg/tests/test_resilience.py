import itertools
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tla.errors import ResilienceExhausted
from tla.resilience import (
    FNV_OFFSET,
    Checksum,
    Consensus,
    CorruptionInjector,
    Replay,
    Replicate,
    Validate,
    canonical_bytes,
    checksum,
    checksum_many,
    checksum_rows,
    fnv1a64,
    format_policy,
    parse_policy,
    run_resilient,
)

CLEAN = np.array([1.5, -2.0, 0.25, 8.0, 0.0, 3.0])


def counted(value=CLEAN):
    calls = []

    def task():
        calls.append(1)
        return value.copy()

    return task, calls


def test_fnv_known_vectors():
    assert fnv1a64(b"") == FNV_OFFSET == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_canonical_layout():
    data = canonical_bytes(np.array([[1.0, 2.0]]))
    assert data == struct.pack("<QQQdd", 2, 1, 2, 1.0, 2.0)
    assert canonical_bytes(3.0) == struct.pack("<Qd", 0, 3.0)


@given(st.lists(st.lists(st.floats(allow_nan=False), min_size=3, max_size=3), min_size=1, max_size=20))
def test_vectorized_checksum_matches_scalar(rows):
    values = np.array(rows)
    assert [int(h) for h in checksum_many(values)] == [checksum(v) for v in values]


def test_sign_flip_is_always_detected_monte_carlo():
    rng = np.random.default_rng(2024)
    trials, width = 1_000_000, 4
    for lo in range(0, trials, 250_000):
        clean = rng.standard_normal((250_000, width))
        dirty = clean.copy()
        cols = rng.integers(0, width, clean.shape[0])
        dirty[np.arange(clean.shape[0]), cols] *= -1.0
        assert not np.any(checksum_many(clean) == checksum_many(dirty))


def test_checksum_rows_on_bytes():
    assert int(checksum_rows(np.frombuffer(b"foobar", dtype=np.uint8)[None, :])[0]) == fnv1a64(b"foobar")


def test_zero_corruption_runs_once_and_is_bitwise_identical():
    task, calls = counted()
    out = run_resilient(task, Replay(3), CorruptionInjector(0.0))
    assert len(calls) == 1 and out.tobytes() == CLEAN.tobytes()
    out = run_resilient(task, Replay(1))
    assert len(calls) == 2 and out.tobytes() == CLEAN.tobytes()


def test_injector_flips_exactly_one_sign_bit():
    inj = CorruptionInjector(1.0, seed=4)
    dirty = inj(CLEAN)
    diff = CLEAN.view(np.uint64) ^ dirty.view(np.uint64)
    assert sorted(int(d) for d in diff if d) == [1 << 63]
    assert (inj.executions, inj.corruptions) == (1, 1)


@pytest.mark.parametrize("pattern", list(itertools.product([False, True], repeat=3)), ids=str)
def test_replicate_three_under_every_corruption_pattern(pattern):
    task, _ = counted()
    inj = CorruptionInjector(schedule=pattern, seed=sum(pattern))
    if sum(pattern) <= 1:
        assert run_resilient(task, Replicate(3), inj).tobytes() == CLEAN.tobytes()
    else:
        # two different flips cannot agree on this vector; three cannot either
        with pytest.raises(ResilienceExhausted):
            run_resilient(task, Replicate(3), inj)


def test_replay_recovers_from_a_transient_fault():
    task, calls = counted()
    inj = CorruptionInjector(schedule=[True, False, False, False])
    assert run_resilient(task, Replay(3), inj).tobytes() == CLEAN.tobytes()
    assert len(calls) == 4  # one bad pair, one good pair


def test_replay_with_permanent_fault_is_exhausted():
    # a long vector, so two independent flips almost never hit the same element
    task, calls = counted(np.arange(4096.0))
    with pytest.raises(ResilienceExhausted):
        run_resilient(task, Replay(5), CorruptionInjector(1.0, seed=1))
    assert len(calls) == 10


def test_double_execution_cannot_see_identical_corruption():
    # both runs flip element 0: the comparison agrees and the bad value passes
    task, _ = counted(np.array([5.0]))
    out = run_resilient(task, Replay(2), CorruptionInjector(1.0, seed=0))
    assert out.tolist() == [-5.0]


def test_replay_with_detector():
    task, calls = counted()
    inj = CorruptionInjector(schedule=[True, True, False])
    out = run_resilient(task, Replay(3, detector=lambda v: bool(np.any(v != CLEAN))), inj)
    assert out.tobytes() == CLEAN.tobytes() and len(calls) == 3


def qualifying_rate(p, trials, seed):
    inj = CorruptionInjector(p, seed=seed)
    ok = 0
    for _ in range(trials):
        try:
            ok += run_resilient(lambda: CLEAN, Replicate(3), inj).tobytes() == CLEAN.tobytes()
        except ResilienceExhausted:
            pass
    return ok / trials


def test_monte_carlo_rate_at_p03():
    # P(at most one of three replicates corrupted) = 0.7**3 + 3 * 0.3 * 0.7**2
    assert abs(qualifying_rate(0.3, 4000, seed=8) - 0.784) <= 0.04


def test_consensus_and_validate_comparators():
    results = [np.array([1.0]), np.array([2.0]), np.array([3.0])]
    vals = iter(results)
    assert run_resilient(lambda: next(vals), Replicate(3, Consensus(lambda v: v[0] > 1))).tolist() == [2.0]
    vals = iter(results)
    chosen = run_resilient(lambda: next(vals), Replicate(3, Validate(lambda v: v[0] > 1, lambda vs: max(vs, key=lambda v: v[0]))))
    assert chosen.tolist() == [3.0]
    with pytest.raises(ResilienceExhausted):
        run_resilient(lambda: np.zeros(1), Replicate(2, Consensus(lambda v: False)))


def test_policy_strings():
    assert parse_policy("replay:4") == Replay(4)
    assert parse_policy("replicate:5:checksum") == Replicate(5, Checksum())
    assert format_policy(parse_policy("replicate:3:checksum")) == "replicate:3:checksum"
    for bad in ("replay:0", "replay", "replicate:3:vote", "replicate:1:checksum"):
        with pytest.raises(ValueError):
            parse_policy(bad)


def test_injector_probability_bounds():
    with pytest.raises(ValueError):
        CorruptionInjector(1.5)
