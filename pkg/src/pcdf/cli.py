"""Command-line entry points: run, sweep, verify, calibrate.

The PCDF_SEED environment variable overrides any --seed flag or config
value. Exit codes: 0 success, 1 verification failure, 2 configuration or
usage errors.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .bench import (
    LatencyReport,
    calibrate,
    emit_report,
    run_experiment,
    verify_equivalence,
    workload_from_settings,
)
from .config import build_pipeline_config, config_hash, load_settings
from .pipeline import Mode
from .simnet import ConfigurationError


def _resolve_seed(args, settings) -> int:
    env = os.environ.get("PCDF_SEED")
    if env is not None:
        try:
            return int(env, 0)
        except ValueError:
            raise ConfigurationError(f"PCDF_SEED: not an integer: {env!r}") from None
    if args.seed is not None:
        return args.seed
    return int(settings["seed"], 0)


def _budget_ns(settings) -> int:
    return int(float(settings["budget_ms"]) * 1e6)


def _print_report(report: LatencyReport, file=None) -> None:
    file = file if file is not None else sys.stdout
    for c in report.cells:
        budget = "within budget" if c.within_budget else "over budget"
        print(
            f"{c.mode:8s} T={c.seq_len:5d}  n={c.count:5d}  failures={c.failures:4d}  "
            f"e2e p50={c.e2e.p50 / 1e6:8.2f}ms p99={c.e2e.p99 / 1e6:8.2f}ms  "
            f"rank p50={c.rank.p50 / 1e6:8.2f}ms p99={c.rank.p99 / 1e6:8.2f}ms  ({budget})",
            file=file,
        )


def _parse_int_list(raw: str, what: str) -> tuple[int, ...]:
    try:
        values = tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigurationError(f"{what}: expected comma-separated integers, got {raw!r}") from None
    if not values:
        raise ConfigurationError(f"{what}: empty list")
    return values


def _cmd_run(args) -> int:
    settings = load_settings(args.config)
    seed = _resolve_seed(args, settings)
    seq_lens = (args.seq_len,) if args.seq_len is not None else None
    workload = workload_from_settings(settings, requests=args.requests, seq_lens=seq_lens, seed=seed)
    mode = Mode(args.mode) if args.mode else None
    config = build_pipeline_config(settings, mode=mode)
    report = run_experiment(
        config,
        workload,
        budget_ns=_budget_ns(settings),
        meta={"config_hash": config_hash(settings)},
    )
    if args.out:
        emit_report(report, args.format, args.out)
        print(f"wrote {args.format} report to {args.out}")
    else:
        _print_report(report)
    return 0


def _cmd_sweep(args) -> int:
    settings = load_settings(args.config)
    seed = _resolve_seed(args, settings)
    seq_lens = _parse_int_list(args.seq_lens, "--seq-lens") if args.seq_lens else None
    modes = [Mode(m.strip()) for m in args.modes.split(",") if m.strip()]
    workload = workload_from_settings(settings, requests=args.requests, seq_lens=seq_lens, seed=seed)
    cells = []
    meta = {"config_hash": config_hash(settings)}
    report = None
    for mode in modes:
        config = build_pipeline_config(settings, mode=mode)
        report = run_experiment(config, workload, budget_ns=_budget_ns(settings), meta=meta)
        cells.extend(report.cells)
    merged = LatencyReport(meta=report.meta if report else meta, cells=cells)
    if args.out:
        emit_report(merged, args.format, args.out)
        print(f"wrote {args.format} report to {args.out}")
    else:
        _print_report(merged)
    return 0


def _cmd_verify(args) -> int:
    settings = load_settings(args.config)
    seed = _resolve_seed(args, settings)
    workload = workload_from_settings(settings, requests=args.requests, seed=seed)
    config = build_pipeline_config(settings)
    result = verify_equivalence(config, workload)
    if result.passed:
        print(
            f"PASS: {result.checked} requests bit-identical across "
            f"{result.paths} execution paths"
        )
        return 0
    print("FAIL: ranked lists diverged", file=sys.stderr)
    print(json.dumps(result.divergence, indent=2, default=str), file=sys.stderr)
    return 1


def _cmd_calibrate(args) -> int:
    settings = load_settings(args.config)
    seed = _resolve_seed(args, settings)
    config = build_pipeline_config(settings)
    seq_lens = _parse_int_list(settings["seq_lens"], "seq_lens")
    rows = calibrate(config, seq_lens, seed=seed)
    cover_exceeded = False
    for row in rows:
        status = "fits under cover" if row.fits else "EXCEEDS cover"
        print(
            f"T={row.seq_len:5d}  encoder span {row.median_span_ns / 1e6:8.2f}ms  "
            f"cover {row.cover_ns / 1e6:8.2f}ms  {status}"
        )
        cover_exceeded = cover_exceeded or not row.fits
    if cover_exceeded:
        print(
            "warning: encoder exceeds the retrieval+pre-rank cover at some "
            "lengths; overlapped-mode rank latency will not be flat there",
            file=sys.stderr,
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcdf",
        description="Overlapped-ranking serving experiments with a deterministic model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one mode and report latency")
    run.add_argument("--mode", choices=[m.value for m in Mode], default=None)
    run.add_argument("--seq-len", type=int, default=None)
    run.add_argument("--requests", type=int, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--config", default=None)
    run.add_argument("--out", default=None)
    run.add_argument("--format", choices=["json", "csv"], default="json")
    run.set_defaults(func=_cmd_run)

    sweep = sub.add_parser("sweep", help="sweep sequence lengths across modes")
    sweep.add_argument("--seq-lens", default=None)
    sweep.add_argument("--modes", default="baseline,pcdf")
    sweep.add_argument("--requests", type=int, default=None)
    sweep.add_argument("--seed", type=int, default=None)
    sweep.add_argument("--config", default=None)
    sweep.add_argument("--out", default=None)
    sweep.add_argument("--format", choices=["json", "csv"], default="csv")
    sweep.set_defaults(func=_cmd_sweep)

    verify = sub.add_parser("verify", help="bit-exact cross-mode equivalence check")
    verify.add_argument("--requests", type=int, default=None)
    verify.add_argument("--seed", type=int, default=None)
    verify.add_argument("--config", default=None)
    verify.set_defaults(func=_cmd_verify)

    cal = sub.add_parser("calibrate", help="measure encoder spans vs upstream cover")
    cal.add_argument("--config", default=None)
    cal.add_argument("--seed", type=int, default=None)
    cal.set_defaults(func=_cmd_calibrate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
