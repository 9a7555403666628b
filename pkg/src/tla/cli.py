"""Command line entry point.

    tla run script.tla --localities 4 [--transport inproc|socket] ...
    tla bench --bench cnn4 --batch 8000 --plist 1,2,4,8 --repeats 5
    tla pipeline --stages 4 --microbatches 8 --policy interleaved
"""

from __future__ import annotations

import argparse
import logging
import subprocess
import sys
from pathlib import Path

from . import __version__
from .bench import BENCH_MODELS, bench_scaling, rows_to_csv
from .comm import FusionConfig, SocketTransport, free_ports
from .counters import export_counters
from .errors import EvaluationError, SourceError, TlaError
from .executor import calibrate_grain
from .job import open_locality
from .pipeline import POLICIES, pipeline_schedule, verify_schedule
from .program import RunConfig, run_on_locality, run_script_text
from .resilience import format_policy, parse_policy
from .runtime import format_value

log = logging.getLogger("tla")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("values must be positive")
    return values


def _policy(text: str):
    try:
        return parse_policy(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _grain(text: str) -> int | str:
    if text == "auto":
        return text
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("grain must be >= 1 or 'auto'")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _add_runtime_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=_positive, default=None, help="worker threads per locality")
    p.add_argument("--grain", type=_grain, default=4096, help="minimum elements per subtask, or 'auto' to calibrate")
    p.add_argument("--fusion-bytes", type=int, default=65536, help="coalescing threshold in bytes (0 disables)")
    p.add_argument("--fusion-ms", type=float, default=2.0, help="flush interval in milliseconds")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tla", description="Tiled-array dataflow runtime")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a .tla script")
    run.add_argument("script", type=Path)
    run.add_argument("--localities", type=_positive, default=1)
    run.add_argument("--transport", choices=("inproc", "socket"), default="inproc")
    _add_runtime_flags(run)
    run.add_argument("--resilience", type=_policy, default=parse_policy("replay:1"), help="replay:N or replicate:K:checksum")
    run.add_argument("--counters", type=Path, default=None, help="write counters CSV here")
    run.add_argument("--spawn-local", action="store_true", help="socket transport: start peer processes locally")
    run.add_argument("--rank", type=int, default=None, help="socket transport: this process's rank")
    run.add_argument("--world", type=int, default=None, help="socket transport: number of processes")
    run.add_argument("--port", type=int, default=None, help="socket transport: rank r listens on PORT+r")
    run.add_argument("--ports", type=_int_list, default=None, help=argparse.SUPPRESS)

    bench = sub.add_parser("bench", help="forward-pass scaling benchmark")
    bench.add_argument("--bench", choices=sorted(BENCH_MODELS), default="cnn4")
    bench.add_argument("--batch", type=_positive, default=8000)
    bench.add_argument("--plist", type=_int_list, default=[1, 2, 4, 8])
    bench.add_argument("--repeats", type=_positive, default=5)
    bench.add_argument("--csv", type=Path, default=None, help="also write the CSV here")
    _add_runtime_flags(bench)

    pipe = sub.add_parser("pipeline", help="print a simulated pipeline schedule")
    pipe.add_argument("--stages", type=_positive, default=4)
    pipe.add_argument("--microbatches", type=_positive, default=8)
    pipe.add_argument("--policy", choices=POLICIES, default="interleaved")
    return parser


def _resolve_grain(args) -> int:
    if args.grain == "auto":
        grain = calibrate_grain(args.threads or 1)
        log.info("calibrated grain: %d", grain)
        return grain
    return args.grain


def _run_config(args) -> RunConfig:
    return RunConfig(
        script=args.script,
        localities=args.localities,
        transport=args.transport,
        worker_threads=args.threads or 1,
        grain_threshold=_resolve_grain(args),
        fusion_bytes=args.fusion_bytes,
        fusion_ms=args.fusion_ms,
        seed=args.seed,
        resilience=args.resilience,
        counters_path=args.counters,
    )


def _finish(value, report, cfg: RunConfig) -> int:
    print(format_value(value))
    if cfg.counters_path is not None:
        export_counters(report, cfg.counters_path)
    return 0


def _child_argv(args, rank: int, world: int, ports: list[int]) -> list[str]:
    argv = [sys.executable, "-m", "tla", "run", str(args.script), "--transport", "socket"]
    argv += ["--rank", str(rank), "--world", str(world), "--ports", ",".join(map(str, ports))]
    argv += ["--threads", str(args.threads or 1), "--grain", str(args.grain)]
    argv += ["--fusion-bytes", str(args.fusion_bytes), "--fusion-ms", str(args.fusion_ms)]
    argv += ["--seed", str(args.seed), "--resilience", format_policy(args.resilience)]
    return argv


def _run_socket(args, source: str) -> int:
    world = args.world or args.localities
    if args.ports is not None:
        ports = args.ports
    elif args.port is not None:
        ports = [args.port + r for r in range(world)]
    else:
        ports = free_ports(world)
    if len(ports) != world:
        raise SystemExit("tla: error: --ports needs one port per rank")
    rank = args.rank
    children = []
    if rank is None:
        # no rank given: act as rank 0 and launch the peers ourselves
        rank = 0
        children = [
            subprocess.Popen(_child_argv(args, r, world, ports), stdout=subprocess.DEVNULL) for r in range(1, world)
        ]
    cfg = _run_config(args)
    loc = open_locality(SocketTransport(rank, world, ports), cfg.fusion, cfg.sched_config)
    try:
        result = run_on_locality(source, loc, seed=cfg.seed, policy=cfg.resilience, timeout=cfg.timeout)
    finally:
        loc.close()
    failed = [c.args[7] for c in children if c.wait() != 0]
    if failed:
        print(f"tla: error: peer rank(s) {', '.join(failed)} failed", file=sys.stderr)
        return 1
    if rank == 0:
        return _finish(result.value, result.report, cfg)
    return 0


def cmd_run(args) -> int:
    try:
        source = args.script.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        print(f"tla: error: cannot read {args.script}: {exc}", file=sys.stderr)
        return 1
    try:
        if args.transport == "socket" and (args.localities > 1 or args.world or args.spawn_local):
            return _run_socket(args, source)
        cfg = _run_config(args)
        result = run_script_text(source, cfg)
        return _finish(result.value, result.report, cfg)
    except SourceError as exc:
        print(f"{args.script}:{exc.line}:{exc.col}: error: {exc.message}", file=sys.stderr)
        return 1
    except EvaluationError as exc:
        print(f"{args.script}:{exc.line}:{exc.col}: runtime error in {exc.primitive}: {exc.cause}", file=sys.stderr)
        return 1
    except (TlaError, TimeoutError, OSError) as exc:
        print(f"tla: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def cmd_bench(args) -> int:
    rows = bench_scaling(
        model=args.bench,
        batch=args.batch,
        plist=args.plist,
        repeats=args.repeats,
        seed=args.seed,
        threads=args.threads,
        grain=_resolve_grain(args),
        fusion=FusionConfig(args.fusion_bytes, args.fusion_ms / 1000.0),
    )
    text = rows_to_csv(rows)
    sys.stdout.write(text)
    if args.csv is not None:
        args.csv.write_text(text)
    return 0


def cmd_pipeline(args) -> int:
    sched = pipeline_schedule(args.stages, args.microbatches, args.policy)
    problems = verify_schedule(sched)
    print(sched.render())
    print(f"slots={sched.total_slots} bubble_fraction={sched.bubble_fraction} ({float(sched.bubble_fraction):.4f})")
    for p in problems:
        print(f"violation: {p}", file=sys.stderr)
    return 1 if problems else 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "run":
        if args.threads is None:
            args.threads = 1
        return cmd_run(args)
    if args.command == "bench":
        return cmd_bench(args)
    return cmd_pipeline(args)


if __name__ == "__main__":
    sys.exit(main())
