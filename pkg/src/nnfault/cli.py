"""Command-line front end: ``nnfault <command> [options]``.

Exit codes: 0 success, 1 other failure, 2 configuration error,
3 I/O or data error, 64 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, DataError, FaultSimError, GraphError, LoadError
from .experiment import (
    ExperimentPlan,
    PlanKind,
    prepare_template,
    ResultTable,
    run_ber_sweep,
    run_bit_sense,
    run_channel_sense,
    run_golden,
    run_inject,
    run_pixel_sense,
    run_propagation,
    timing_report,
    write_grid,
)
from .modelio import FIXTURE_SEED, load_dataset, load_fixture, load_model, write_fixture
from .quant import write_ranges

EXIT_CONFIG, EXIT_IO, EXIT_USAGE = 2, 3, 64

INJECTION_COMMANDS = ("inject", "sweep", "bitsense", "channelsense", "pixelsense", "propagate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _bits(text: str) -> tuple[int, ...]:
    try:
        if "-" in text:
            lo, hi = text.split("-", 1)
            return tuple(range(int(lo), int(hi) + 1))
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a bit range like 0-15 or 0,3,7, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nnfault", description="Fault injection experiments on small CNN inference graphs.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(p, config=True):
        p.add_argument("--model", help="model description file (default: bundled fixture)")
        p.add_argument("--weights", help="MRFW weights file")
        p.add_argument("--data", help="MRFD dataset file")
        p.add_argument("--limit", type=int, help="use only the first N samples")
        p.add_argument("--seed", type=int)
        p.add_argument("--trials", type=int, default=1)
        p.add_argument("--jobs", type=int, default=1, help="worker threads for trials")
        p.add_argument("--config", required=config, help="EasyConfig or tree config file")
        p.add_argument("--out", help="output CSV (stdout when omitted)")
        return p

    common(sub.add_parser("golden", help="fault-free accuracy"), config=False)
    p = common(sub.add_parser("inject", help="repeated injection with a config as-is"))
    p.add_argument("--timing", help="also write golden vs injected wall-clock CSV here")
    p = common(sub.add_parser("sweep", help="accuracy over a list of bit error rates"))
    p.add_argument("--ber", type=_floats, required=True, help="comma-separated, strictly increasing")
    p = common(sub.add_parser("bitsense", help="per-bit sensitivity"))
    p.add_argument("--bits", type=_bits, help="bit range, e.g. 0-15 (default: whole word)")
    p = common(sub.add_parser("channelsense", help="per-channel sensitivity of a conv layer"))
    p.add_argument("--layer")
    p.add_argument("--ranked", help="rank-sorted RMSE CSV (default: <out>_ranked.csv)")
    p = common(sub.add_parser("pixelsense", help="per-pixel sensitivity grid"))
    p.add_argument("--layer")
    p.add_argument("--grid", help="HxW RMSE matrix CSV (default: <out>_grid.csv)")
    common(sub.add_parser("propagate", help="per-layer error propagation"))
    common(sub.add_parser("calibrate", help="per-layer dynamic ranges"), config=False)
    p = sub.add_parser("fixture", help="write the deterministic fixture model and dataset")
    p.add_argument("--seed", type=int, default=FIXTURE_SEED)
    p.add_argument("--out", required=True, help="output directory")
    p = sub.add_parser("validate-config", help="parse and resolve a config without running")
    p.add_argument("--config", required=True)
    p.add_argument("--model")
    p.add_argument("--weights")
    p.add_argument("--for", dest="for_command", choices=tuple(RUNNERS), default="inject", help="command the config is meant for")
    return parser


def _load(args):
    if args.model is None:
        if args.weights is not None:
            raise UsageError("--weights needs --model")
        graph, ds = load_fixture()
    else:
        if args.weights is None:
            raise UsageError("--model needs --weights")
        graph, ds = load_model(args.model, args.weights), None
    if getattr(args, "data", None) is not None:
        ds = load_dataset(args.data, graph.input_shape)
    elif ds is None and args.command != "validate-config":
        raise UsageError("--data is required with --model")
    if ds is not None and getattr(args, "limit", None) is not None:
        ds = ds.subset(args.limit)
    return graph, ds


def _emit(table: ResultTable, out: str | None) -> None:
    if out is None:
        sys.stdout.write(table.to_csv())
    else:
        table.write_csv(out)
        print(f"wrote {out} ({len(table.rows)} rows)")


def _sidecar(out: str | None, explicit: str | None, suffix: str) -> str | None:
    if explicit is not None:
        return explicit
    if out is None:
        return None
    p = Path(out)
    return str(p.with_name(f"{p.stem}_{suffix}{p.suffix or '.csv'}"))


RUNNERS = {
    "inject": (PlanKind.SingleInject, run_inject),
    "sweep": (PlanKind.BerSweep, run_ber_sweep),
    "bitsense": (PlanKind.BitSense, run_bit_sense),
    "channelsense": (PlanKind.ChannelSense, run_channel_sense),
    "pixelsense": (PlanKind.PixelSense, run_pixel_sense),
    "propagate": (PlanKind.Propagation, run_propagation),
}


def _run(args) -> int:
    cmd = args.command
    if cmd == "fixture":
        for path in write_fixture(args.out, args.seed):
            print(f"wrote {path}")
        return 0
    if cmd in INJECTION_COMMANDS and args.seed is None:
        raise UsageError(f"{cmd} needs --seed; runs are never seeded implicitly")
    if getattr(args, "trials", 1) < 1 or getattr(args, "jobs", 1) < 1:
        raise UsageError("--trials and --jobs must be at least 1")

    graph, ds = _load(args)
    if cmd == "validate-config":
        resolved = prepare_template(RUNNERS[args.for_command][0], load_config(args.config), graph)
        print(f"ok,{len(resolved.enabled)} enabled layers")
        return 0
    if cmd == "golden":
        result = run_golden(graph, ds)
        print(f"accuracy,{result.accuracy:.4f}")
        if args.out:
            table = ResultTable()
            table.add("golden", "accuracy", [result.accuracy])
            table.write_csv(args.out)
        return 0
    if cmd == "calibrate":
        ranges = run_golden(graph, ds).ranges
        if args.out is None:
            print("path,min,max")
            for key, r in ranges.items():
                print(f"{key},{r.min_val!r},{r.max_val!r}")
        else:
            write_ranges(ranges, args.out)
            print(f"wrote {args.out} ({len(ranges)} ranges)")
        return 0

    kind, runner = RUNNERS[cmd]
    template = prepare_template(kind, load_config(args.config), graph)
    plan = ExperimentPlan(
        kind,
        trials=args.trials,
        seed=args.seed,
        bers=getattr(args, "ber", ()) or (),
        bits=getattr(args, "bits", None),
        layer=getattr(args, "layer", None),
        jobs=args.jobs,
    )
    table = runner(plan, template, graph, ds)
    _emit(table, args.out)
    if cmd == "channelsense":
        ranked = _sidecar(args.out, args.ranked, "ranked")
        if ranked:
            table.ranked("rmse").write_csv(ranked)
            print(f"wrote {ranked}")
    elif cmd == "pixelsense":
        grid = _sidecar(args.out, args.grid, "grid")
        if grid:
            write_grid(table.grid, grid)
            print(f"wrote {grid}")
    elif cmd == "inject" and args.timing:
        t = timing_report(plan, template, graph, ds)
        Path(args.timing).write_text(t.to_csv())
        print(f"ratio,{t.ratio:.4f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _run(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LoadError, DataError, GraphError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FaultSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
