import numpy as np
import pytest

from conftest import CORPUS, corpus_scripts
from tla.counters import CounterReport, export_counters, load_counters
from tla.errors import EvaluationError, ResilienceExhausted
from tla.program import RunConfig, run_script_text
from tla.resilience import CorruptionInjector, Replicate
from tla.runtime import format_value

# frozen program values: (1 locality, 3 localities)
EXPECTED = {
    "allgather_rank": ("[0]", "[0, 10, 20]"),
    "allreduce_max": ("0", "2"),
    "allreduce_rank": ("1", "6"),
    "arith_basic": ("6", "6"),
    "arith_nested": ("10", "10"),
    "arith_unary": ("[-3, 4, 4, 1, 0]", "[-3, 4, 4, 1, 0]"),
    "broadcast_root": ("42", "42"),
    "compare_if": ("9", "9"),
    "conv_small": ("[[[3, 5]]]", "[[[3, 5]]]"),
    "define_shared": ("9", "9"),
    "dist_sum": ("499500", "499500"),
    "dot_matrix": ("[[3, 3], [3, 3]]", "[[3, 3], [3, 3]]"),
    "empty": ("nil", "nil"),
    "fusion_many_small": ("60", "180"),
    "iota_sum": ("4950", "4950"),
    "list_sugar": ("[1, 2.5, [3, 4]]", "[1, 2.5, [3, 4]]"),
    "locality_info": ("[0, 1]", "[0, 3]"),
    "mean_reduce": ("1", "1"),
    "nth_pick": ("20", "20"),
    "pow_chain": ("64", "64"),
    "randn_mean": ("0.0005643995402323782", "0.0005643995402323782"),
    "random_seeded": ("0xffd1171b9723ac63", "0xffd1171b9723ac63"),
    "resilient_replay": ("45", "45"),
    "shape_ops": ("[[4, 3], 12]", "[[4, 3], 12]"),
    "slice_concat": ("[2, 3, 4, 7, 8]", "[2, 3, 4, 7, 8]"),
    "spatial_conv": ("0x5db3573c128502af", "0x5db3573c128502af"),
}
CNN4_SCRIPT_LOSS = 1.6891496860897774


def run(name_or_src, **kw):
    path = CORPUS / f"{name_or_src}.tla"
    src = path.read_text() if path.exists() else name_or_src
    return run_script_text(src, RunConfig(**kw))


@pytest.mark.parametrize("name", sorted(EXPECTED))
def test_corpus_values(name):
    one, three = EXPECTED[name]
    assert format_value(run(name, localities=1).value) == one
    assert format_value(run(name, localities=3).value) == three


def test_halo_and_cnn4_scripts():
    assert run("halo_gather", localities=4).value.tolist() == list(range(64))
    for P in (1, 2, 4):
        assert abs(run("cnn4_loss", localities=P).value - CNN4_SCRIPT_LOSS) <= 1e-10


def test_every_corpus_script_has_an_oracle():
    assert {p.stem for p in corpus_scripts()} == set(EXPECTED) | {"halo_gather", "cnn4_loss"}


@pytest.mark.parametrize(
    "cfg",
    [
        dict(transport="socket"),
        dict(worker_threads=4),
        dict(grain_threshold=1),
        dict(fusion_bytes=0),
        dict(worker_threads=3, grain_threshold=100, fusion_bytes=128, fusion_ms=0.1),
    ],
    ids=["socket", "threads", "grain", "nofusion", "mixed"],
)
def test_value_is_independent_of_execution_settings(cfg):
    for name in ("spatial_conv", "randn_mean", "fusion_many_small", "dist_sum"):
        assert format_value(run(name, localities=3, **cfg).value) == EXPECTED[name][1]


def test_reproducible_envelope_counts():
    a, b = run("fusion_many_small", localities=4), run("fusion_many_small", localities=4)
    assert a.report.envelopes_sent == b.report.envelopes_sent
    assert a.report.collectives_completed == b.report.collectives_completed == 8 * 4


def test_empty_run_counters_are_zero_except_wall_time():
    for P in (1, 2):
        report = run("empty", localities=P).report
        row = report.to_dict()
        assert row.pop("wall_time_ns") > 0
        assert set(row.values()) == {0}


def test_seed_changes_random_values():
    assert run("random_seeded", seed=1).value != run("random_seeded", seed=0).value


def test_runtime_errors_name_the_node():
    with pytest.raises(EvaluationError) as info:
        run("(add 1\n  (reshape (iota 5) [2 2]))")
    assert (info.value.primitive, info.value.line, info.value.col) == ("reshape", 2, 3)


def test_primitive_counters_count_calls():
    report = run("(define x (neg 2))\n(add x x (neg 3))").report
    assert report.primitives["neg"][0] == 2
    assert report.primitives["add"][0] == 1
    assert report.tasks_spawned >= 4


def test_counters_csv_round_trip(tmp_path):
    report = run("fusion_many_small", localities=2).report
    path = tmp_path / "c.csv"
    export_counters(report, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "counter,value"
    assert [l.split(",")[0] for l in lines[1:7]] == [
        "tasks_spawned", "envelopes_sent", "frames_sent", "bytes_sent", "collectives_completed", "wall_time_ns",
    ]
    assert load_counters(path) == report


def test_merge_sums_and_takes_longest_wall_time():
    a = CounterReport(tasks_spawned=2, wall_time_ns=5, primitives={"add": (1, 10)})
    b = CounterReport(tasks_spawned=3, wall_time_ns=9, primitives={"add": (2, 1), "neg": (1, 1)})
    m = CounterReport.merge([a, b])
    assert (m.tasks_spawned, m.wall_time_ns) == (5, 9)
    assert m.primitives == {"add": (3, 11), "neg": (1, 1)}


def test_resilient_script_under_injection():
    src = '(resilient "replicate:3:checksum" (iota 64))'
    inj = CorruptionInjector(schedule=[False, True, False])
    out = run_script_text(src, RunConfig(), injector=inj)
    np.testing.assert_array_equal(out.value, np.arange(64.0))
    with pytest.raises(EvaluationError) as info:
        run_script_text('(resilient "replay:2" (iota 64))', RunConfig(), injector=CorruptionInjector(1.0, seed=3))
    assert isinstance(info.value.cause, ResilienceExhausted)


def test_default_policy_applies_to_resilient_without_string():
    inj = CorruptionInjector(schedule=[True, False, False])
    out = run_script_text("(resilient (iota 8))", RunConfig(resilience=Replicate(3)), injector=inj)
    np.testing.assert_array_equal(out.value, np.arange(8.0))
