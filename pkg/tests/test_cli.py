import subprocess
import sys

import pytest

from conftest import CORPUS
from tla.bench import ScalingRow, bench_scaling, rows_from_csv, rows_to_csv
from tla.cli import main
from tla.counters import load_counters


def tla(*args, timeout=120):
    return subprocess.run([sys.executable, "-m", "tla", *map(str, args)], capture_output=True, text=True, timeout=timeout)


def test_hello(tmp_path, capsys):
    script = tmp_path / "hello.tla"
    script.write_text("(add 1 2)\n")
    assert main(["run", "--localities", "1", str(script)]) == 0
    assert capsys.readouterr().out == "3\n"


def test_malformed_script_reports_position(tmp_path, capsys):
    script = tmp_path / "bad.tla"
    script.write_text("(add 1\n  (neg 2)")
    assert main(["run", str(script)]) != 0
    err = capsys.readouterr().err
    assert err.startswith(f"{script}:1:1: error:")


def test_runtime_error_exit_code(tmp_path, capsys):
    script = tmp_path / "bad.tla"
    script.write_text("(reshape (iota 5) [2 2])")
    assert main(["run", str(script)]) == 1
    assert ":1:1: runtime error in reshape" in capsys.readouterr().err


def test_missing_file(capsys):
    assert main(["run", "/nonexistent/x.tla"]) == 1


def test_inproc_and_socket_print_the_same_value():
    script = CORPUS / "spatial_conv.tla"
    a = tla("run", "--localities", 4, script)
    b = tla("run", "--localities", 4, "--transport", "socket", script)
    assert a.returncode == b.returncode == 0, (a.stderr, b.stderr)
    assert a.stdout == b.stdout == "0x5db3573c128502af\n"


def test_socket_ranks_started_separately():
    from tla.comm import free_ports

    script = CORPUS / "allreduce_rank.tla"
    ports = ",".join(map(str, free_ports(3)))
    procs = [
        subprocess.Popen(
            [sys.executable, "-m", "tla", "run", str(script), "--transport", "socket", "--rank", str(r), "--world", "3", "--ports", ports],
            stdout=subprocess.PIPE,
            text=True,
        )
        for r in range(3)
    ]
    outs = [p.communicate(timeout=120)[0] for p in procs]
    assert [p.returncode for p in procs] == [0, 0, 0]
    assert outs == ["6\n", "", ""]


def test_counters_flag(tmp_path, capsys):
    path = tmp_path / "c.csv"
    assert main(["run", "--localities", "2", "--counters", str(path), str(CORPUS / "fusion_many_small.tla")]) == 0
    report = load_counters(path)
    assert report.collectives_completed == 16 and report.envelopes_sent > 0


def test_resilience_flag_is_validated(tmp_path):
    with pytest.raises(SystemExit):
        main(["run", "--resilience", "replay:0", str(CORPUS / "arith_basic.tla")])


def test_pipeline_subcommand(capsys):
    assert main(["pipeline", "--stages", "4", "--microbatches", "8"]) == 0
    assert "bubble_fraction=3/11" in capsys.readouterr().out


def test_bench_trivial_model(tmp_path, capsys):
    csv_path = tmp_path / "b.csv"
    assert main(["bench", "--bench", "tiny", "--batch", "64", "--plist", "1", "--repeats", "3", "--csv", str(csv_path)]) == 0
    out = capsys.readouterr().out
    assert out == csv_path.read_text()
    rows = rows_from_csv(out)
    assert len(rows) == 1 and rows[0].localities == 1 and rows[0].mean_seconds > 0


def test_bench_rows_round_trip():
    rows = [ScalingRow(1, 0.5, 0.01, 1.7), ScalingRow(8, 0.123456789012345, 1e-9, 1.7000000000000002)]
    assert rows_from_csv(rows_to_csv(rows)) == rows


def test_bench_loss_agrees_across_localities():
    rows = bench_scaling("tiny", batch=37, plist=[1, 2, 3], repeats=3)
    assert [r.localities for r in rows] == [1, 2, 3]
    assert max(r.loss for r in rows) - min(r.loss for r in rows) <= 1e-12


def test_bench_needs_three_repeats():
    with pytest.raises(ValueError):
        bench_scaling("tiny", batch=8, plist=[1], repeats=2)
