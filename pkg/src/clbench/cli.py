"""Command-line front door.

Subcommands::

    clbench build-timeline --catalog C --scenario lil --seed 1 --out tl.json
    clbench run --timeline tl.json --catalog C --strategy er --out DIR
    clbench report --run-dir DIR [--format table|series]
    clbench compare --run-dirs A B ... [--metric amer]

Exit codes: 0 success, 2 validation error, 3 runtime error, 4 resume
mismatch. The default output root is ``./clbench_out``, overridable with the
``CLBENCH_OUT_ROOT`` environment variable or ``--out-root``; the shared
base-model/reference cache lives under ``<root>/cache`` and run directories
default to ``<root>/runs/<timeline>-<strategy>``.

``run`` reads an optional JSON config file shaped like
``RunConfig.to_jsonable()``; command-line flags override file values and the
effective configuration is echoed into the run directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from decimal import Decimal
from pathlib import Path

from .errors import CLBenchError, ResumeMismatchError, ValidationError
from .manifest import load_catalog
from .runner import RunConfig, load_run_result, restart_from_joint, run_strategy
from .strategies import STRATEGY_KINDS
from .timeline import BUILDERS, DEFAULT_TAU, load_timeline, save_timeline, validate_timeline

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_RESUME_MISMATCH = 4


def _out_root(args) -> Path:
    if getattr(args, "out_root", None):
        return Path(args.out_root)
    return Path(os.environ.get("CLBENCH_OUT_ROOT", "clbench_out"))


def _print_timeline_summary(timeline, catalog) -> None:
    hours = {b.batch_id: b.hours for b in catalog.batches}
    seen_langs: set[str] = set()
    seen_domains = 0
    print(f"scenario={timeline.scenario} seed={timeline.seed} tau={timeline.tau}")
    print(f"{'episode':>7} {'batches':>7} {'new_langs':>9} {'hours':>9} {'cum_domains':>11}")
    for ep in timeline.episodes:
        langs = {catalog.batch(b).language for b in ep.batch_ids}
        new = len(langs - seen_langs)
        seen_langs |= langs
        seen_domains += len(ep.batch_ids)
        ep_hours = sum((hours[b] for b in ep.batch_ids), Decimal(0))
        print(f"{ep.index:>7} {len(ep.batch_ids):>7} {new:>9} {str(ep_hours):>9} {seen_domains:>11}")


def _cmd_build_timeline(args) -> int:
    catalog = load_catalog(args.catalog)
    builder = BUILDERS[args.scenario]
    if args.scenario == "lil":
        timeline = builder(catalog, args.seed)
    else:
        timeline = builder(catalog, args.seed, tau=args.tau)
    report = validate_timeline(timeline, catalog)
    if not report.ok:
        raise ValidationError("; ".join(report.violations))
    save_timeline(timeline, args.out)
    print(f"wrote {args.out}")
    _print_timeline_summary(timeline, catalog)
    return EXIT_OK


def _load_run_config(args) -> RunConfig:
    obj = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file parse error: {exc}") from None
    if args.strategy:
        if args.strategy not in STRATEGY_KINDS:
            raise ValidationError(
                f"unknown strategy {args.strategy!r}; supported: {', '.join(STRATEGY_KINDS)}"
            )
        obj.setdefault("strategy", {})["kind"] = args.strategy
    if args.seed is not None:
        obj["run_seed"] = args.seed
    try:
        return RunConfig.from_jsonable(obj)
    except TypeError as exc:
        raise ValidationError(f"bad config field: {exc}") from None


def _cmd_run(args) -> int:
    catalog = load_catalog(args.catalog)
    timeline = load_timeline(args.timeline)
    report = validate_timeline(timeline, catalog)
    if not report.ok:
        raise ValidationError("timeline does not fit catalog: " + "; ".join(report.violations))
    cfg = _load_run_config(args)
    root = _out_root(args)
    cache_dir = root / "cache"
    out_dir = (
        Path(args.out)
        if args.out
        else root / "runs" / f"{Path(args.timeline).stem}-{cfg.strategy.kind}-seed{cfg.run_seed}"
    )
    if args.restart_from is not None:
        result = restart_from_joint(
            catalog, timeline, cfg, args.restart_from, out_dir, cache_dir, resume=args.resume
        )
    else:
        result = run_strategy(catalog, timeline, cfg, out_dir, cache_dir, resume=args.resume)
    print(f"run complete: {result.out_dir}")
    if result.series:
        final = result.series[-1]
        print(
            f"final episode {final['episode']}: amer={final['amer']:.4f}"
            + (f" bwt={final['bwt']:.4f}" if final["bwt"] is not None else "")
        )
    return EXIT_OK


def _format_cell(value) -> str:
    return "" if value is None else f"{value:.6f}"


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "run.json").exists():
        raise ValidationError(f"{run_dir} does not contain a run")
    result = load_run_result(run_dir)
    if result.series is None:
        raise ValidationError(f"{run_dir} holds an incomplete run; resume it first")
    if args.format == "series":
        print("episode,amer,fwt,bwt,im")
        for entry in result.series:
            cells = ["" if entry[k] is None else repr(entry[k]) for k in ("amer", "fwt", "bwt", "im")]
            print(f"{entry['episode']}," + ",".join(cells))
        return EXIT_OK
    print(f"{'episode':>7} {'amer':>10} {'fwt':>10} {'bwt':>10} {'im':>10}")
    for entry in result.series:
        print(
            f"{entry['episode']:>7} {_format_cell(entry['amer']):>10} {_format_cell(entry['fwt']):>10} "
            f"{_format_cell(entry['bwt']):>10} {_format_cell(entry['im']):>10}"
        )
    return EXIT_OK


def _cmd_compare(args) -> int:
    runs = []
    for d in args.run_dirs:
        run_dir = Path(d)
        run_json = run_dir / "run.json"
        if not run_json.exists():
            raise ValidationError(f"{run_dir} does not contain a run")
        meta = json.loads(run_json.read_text(encoding="utf-8"))
        if not meta.get("complete"):
            raise ValidationError(f"{run_dir} holds an incomplete run")
        result = load_run_result(run_dir)
        runs.append((run_dir.name, meta, result))
    timeline_shas = {meta["timeline"]["sha"] for _, meta, _ in runs}
    if len(timeline_shas) > 1:
        raise ValidationError("compared runs were produced on different timelines")
    names = [name for name, _, _ in runs]
    print("episode," + ",".join(names))
    tau = runs[0][1]["timeline"]["tau"]
    for t in range(tau + 1):
        cells = []
        for _, _, result in runs:
            value = result.series[t][args.metric]
            cells.append("" if value is None else repr(value))
        print(f"{t}," + ",".join(cells))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clbench",
        description="continual-learning timelines, strategy runs and MER metrics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-timeline", help="compile a catalog into an episodic timeline")
    p.add_argument("--catalog", required=True)
    p.add_argument("--scenario", required=True, choices=sorted(BUILDERS))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tau", type=int, default=DEFAULT_TAU, help="episode count after the base (dil/lidil)")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_build_timeline)

    p = sub.add_parser("run", help="execute a strategy run (references included)")
    p.add_argument("--timeline", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--strategy", help=f"one of: {', '.join(STRATEGY_KINDS)}")
    p.add_argument("--config", help="JSON run config; flags override file values")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="run directory (default: <root>/runs/<timeline>-<strategy>)")
    p.add_argument("--out-root", help="output root (default $CLBENCH_OUT_ROOT or ./clbench_out)")
    p.add_argument("--resume", action="store_true", help="continue an interrupted run")
    p.add_argument("--restart-from", type=int, default=None, help="joint-train through this episode first")
    p.set_defaults(handler=_cmd_run)

    p = sub.add_parser("report", help="print the metric series of one run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--format", choices=("table", "series"), default="table")
    p.set_defaults(handler=_cmd_report)

    p = sub.add_parser("compare", help="aligned metric series across runs on one timeline")
    p.add_argument("--run-dirs", nargs="+", required=True)
    p.add_argument("--metric", choices=("amer", "fwt", "bwt", "im"), default="amer")
    p.set_defaults(handler=_cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ResumeMismatchError as exc:
        print(f"resume mismatch: {exc}", file=sys.stderr)
        return EXIT_RESUME_MISMATCH
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CLBenchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
