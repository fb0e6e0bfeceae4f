"""Command-line entry point: ``crimespat <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigError, CrimeSpatError
from .ingest import CrimeType, Window
from .pipeline import RunConfig, run_pipeline, run_stage, write_manifest
from .synth import SynthConfig, make_city, write_inputs

log = logging.getLogger("crimespat")

STAGE_OF = {
    "ingest-check": "ingest",
    "select-parcels": "select-parcels",
    "weights": "weights",
    "moran": "moran",
    "hotspots": "hotspots",
    "correlate": "correlate",
    "regress": "regress",
    "report": "report",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _night_window(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("expected TYPE=HH:MM-HH:MM, e.g. robbery=21:00-03:00")
    return key.strip(), value.strip()


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("inputs")
    g.add_argument("--config", help="JSON run configuration; flags override its values")
    g.add_argument("--crimes", help="crime CSV (type, datetime, x, y)")
    g.add_argument("--blockgroups", help="block-group GeoJSON")
    g.add_argument("--parcels", help="parcel GeoJSON or CSV")
    g.add_argument("--licenses", help="liquor-license CSV (x, y)")
    g.add_argument("--boundary", help="city boundary GeoJSON")
    g.add_argument("--cbd-x", type=float)
    g.add_argument("--cbd-y", type=float)
    g.add_argument("--feet-per-unit", type=float, help="feet per coordinate unit (default 1)")
    g.add_argument("--out", help="output directory (default ./out)")
    t = p.add_argument_group("thresholds")
    t.add_argument("--night-window", action="append", type=_night_window, metavar="TYPE=HH:MM-HH:MM")
    t.add_argument("--unit-threshold", type=int)
    t.add_argument("--cluster-min-units", type=int)
    t.add_argument("--cluster-gap-ft", type=float)
    t.add_argument("--radius-miles", type=float)
    t.add_argument("--grid-step-ft", type=float)
    t.add_argument("--permutations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--gstar-z", type=float)
    t.add_argument("--contiguity-tol", type=float)
    t.add_argument("--drop-islands", action="store_true", default=None)
    t.add_argument("--profile-cold", action="store_true", default=None, help="also profile cold spots")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crimespat", description="Day/night acquisitive-crime spatial analysis pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("run", help="run every stage and write all tables and layers"))
    for name, text in (
        ("ingest-check", "parse inputs, assign to block groups, compute rates"),
        ("select-parcels", "select large multiunit parcels, QmiParc and coverage"),
        ("weights", "build Queen contiguity weights and the island report"),
        ("hotspots", "Getis-Ord G* for every crime type and window"),
        ("correlate", "Spearman correlation tables"),
        ("regress", "spatial lag models"),
        ("report", "render tables and layers from the cache"),
    ):
        _common(sub.add_parser(name, help=text))
    m = sub.add_parser("moran", help="global Moran's I with permutation inference")
    _common(m)
    m.add_argument("--crime", type=CrimeType.parse, help="restrict to one crime type")
    m.add_argument("--window", type=lambda s: Window(s.capitalize()), help="All, Day or Night")
    s = sub.add_parser("synth", help="write a synthetic city in the pipeline input formats")
    s.add_argument("--out", required=True)
    s.add_argument("--rows", type=int, default=12)
    s.add_argument("--cols", type=int, default=12)
    s.add_argument("--seed", type=int, default=2014)
    s.add_argument("--rho", type=float, default=0.4)
    s.add_argument("--crime-scale", type=float, default=1.0)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cbd = None
    if (args.cbd_x is None) != (args.cbd_y is None):
        raise ConfigError("--cbd-x and --cbd-y must be given together")
    if args.cbd_x is not None:
        cbd = (args.cbd_x, args.cbd_y)
    overrides = {
        "crimes": args.crimes,
        "blockgroups": args.blockgroups,
        "parcels": args.parcels,
        "licenses": args.licenses,
        "boundary": args.boundary,
        "cbd": cbd,
        "feet_per_unit": args.feet_per_unit,
        "night_windows": dict(args.night_window) if args.night_window else None,
        "unit_threshold": args.unit_threshold,
        "cluster_min_units": args.cluster_min_units,
        "cluster_gap_ft": args.cluster_gap_ft,
        "radius_miles": args.radius_miles,
        "grid_step_ft": args.grid_step_ft,
        "permutations": args.permutations,
        "seed": args.seed,
        "gstar_z": args.gstar_z,
        "contiguity_tol": args.contiguity_tol,
        "drop_islands": args.drop_islands,
        "profile_cold": args.profile_cold,
        "out": args.out,
    }
    return RunConfig.load(args.config, overrides)


def _synth(args) -> int:
    try:
        cfg = SynthConfig(rows=args.rows, cols=args.cols, seed=args.seed, rho=args.rho, crime_scale=args.crime_scale)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    paths = write_inputs(make_city(cfg), args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
    return 0


def _dispatch(args) -> int:
    if args.command == "synth":
        return _synth(args)
    cfg = config_from_args(args)
    if args.command == "run":
        path = run_pipeline(cfg)
        print(f"wrote outputs to {cfg.out} (manifest {path})")
        return 0
    stage = STAGE_OF[args.command]
    kwargs = {}
    if stage == "moran":
        kwargs = {"crime": args.crime, "window": args.window}
    summary = run_stage(stage, cfg, **kwargs)
    if stage == "report":
        write_manifest(cfg, "ok")
    print(json.dumps(_printable(summary), indent=1, sort_keys=True, default=str))
    return 0


def _printable(summary: dict) -> dict:
    return {k: v for k, v in summary.items() if k not in ("fig2", "rejected", "distance_histogram", "unit_histogram")}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    try:
        args = parser.parse_args(argv)
        log.setLevel(logging.INFO if args.verbose else logging.WARNING)
        return _dispatch(args)
    except CrimeSpatError as exc:
        print(f"crimespat: error: {exc}", file=sys.stderr)
        return exc.exit_code
    finally:
        log.removeHandler(handler)


if __name__ == "__main__":
    sys.exit(main())
