"""Command-line entry point: ``fedtraffic run|sweep|compare|plot``."""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Optional, Sequence

from fedtraffic.config import MODES, ConfigError, ScenarioConfig, load_config
from fedtraffic.export import export_csv, export_plot
from fedtraffic.harness import RunReport, compare, run_scenario, sweep

EXIT_OK, EXIT_INVALID, EXIT_NOT_REPRODUCED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _seed_list(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list: {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _positive(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        n = 0
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML scenario file (defaults if omitted)")
    common.add_argument("--seed", type=_seed_list, help="comma-separated seeds, e.g. 0,1,2")
    common.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
    common.add_argument("--epochs", type=_positive, help="training epochs per run")

    parser = _Parser(prog="fedtraffic", description="Federated traffic-control experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", parents=[common], help="run one mode from a config file")
    p.add_argument("--mode", choices=MODES, help="override the configured mode")
    p.add_argument("--trace", action="store_true", help="write per-seed event traces")

    p = sub.add_parser("sweep", parents=[common], help="run all six modes with shared seeds")
    p.add_argument("--trace", action="store_true", help="write per-seed event traces")
    p.add_argument("--jobs", type=_positive, default=1, help="parallel worker processes")
    p.add_argument("--check", action="store_true", help="exit 2 if a claim is not reproduced")

    p = sub.add_parser("compare", parents=[common], help="claims table from saved reports")
    p.add_argument("reports", nargs="*", type=Path,
                   help="report files (default: report_*.json in --out)")
    p.add_argument("--check", action="store_true", help="exit 2 if a claim is not reproduced")

    p = sub.add_parser("plot", parents=[common], help="SVG of mean speed per mode")
    p.add_argument("reports", nargs="*", type=Path,
                   help="report files (default: report_*.json in --out)")
    return parser


def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    changes = {}
    if args.seed is not None:
        changes["seeds"] = args.seed
    if args.epochs is not None:
        changes["training_epochs"] = args.epochs
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "trace", False):
        changes["record_trace"] = True
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _out_dir(args, cfg: Optional[ScenarioConfig] = None) -> Path:
    out = args.out or Path(cfg.output_dir if cfg else "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save(report: RunReport, out: Path) -> None:
    report.save(out / f"report_{report.mode}.json")
    export_csv(report, out / f"metrics_{report.mode}.csv")


def _progress(mode, seed):
    print(f"  finished {mode} seed {seed}", file=sys.stderr)


def _comparison(reports, out: Path, cfg_claims, check: bool) -> int:
    table = compare(reports, cfg_claims)
    text = table.render()
    print(text, end="")
    (out / "comparison.txt").write_text(text, encoding="utf-8")
    (out / "comparison.json").write_text(table.to_json(), encoding="utf-8")
    if check and not table.all_reproduced:
        return EXIT_NOT_REPRODUCED
    return EXIT_OK


def _load_reports(args, out: Path) -> list[RunReport]:
    paths = args.reports or sorted(out.glob("report_*.json"))
    if not paths:
        raise FileNotFoundError(f"no reports given and none found in {out}")
    return [RunReport.load(p) for p in paths]


def _dispatch(args) -> int:
    if args.command == "run":
        cfg = _config(args)
        out = _out_dir(args, cfg)
        report = run_scenario(cfg, out if cfg.record_trace else None, _progress)
        _save(report, out)
        print(f"{report.mode}: pooled final-window mean speed {report.pooled_mean:.4f} m/s")
        return EXIT_OK
    if args.command == "sweep":
        cfg = _config(args)
        out = _out_dir(args, cfg)
        reports = sweep(cfg, MODES, out if cfg.record_trace else None, args.jobs, _progress)
        for r in reports:
            _save(r, out)
        export_plot(reports, out / "mean_speed.svg")
        return _comparison(reports, out, cfg.claims, args.check)
    cfg = load_config(args.config) if args.config else None
    out = _out_dir(args)
    reports = _load_reports(args, out)
    if args.command == "compare":
        claims = cfg.claims if cfg else None
        return _comparison(reports, out, claims, args.check)
    export_plot(reports, out / "mean_speed.svg")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _dispatch(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        print(f"fedtraffic: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
