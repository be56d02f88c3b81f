"""Command-line entry point: ``cpspoof <stage> --config run.json --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import detector as det
from . import harness


def _add_common(p, multi=False):
    if multi:
        p.add_argument("--config", action="append", required=True,
                       help="run config JSON (repeatable)")
    else:
        p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, help="override the config seed(s)")
    p.add_argument("--imu", choices=["industrial", "consumer"], help="IMU grade")
    p.add_argument("--attack", help="attack spec JSON, or 'none'")
    p.add_argument("--detector", choices=["chi2", "empirical"], help="threshold mode")
    p.add_argument("--pf", type=float, help="false-alarm probability for chi2 mode")
    p.add_argument("--thresholds", help="empirical thresholds JSON")
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="cpspoof", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("simulate", "generate truth, IMU and observables"),
        ("inject", "rewrite the observable stream with the configured attack"),
        ("filter", "run the CDGNSS/IMU estimator"),
        ("detect", "evaluate the WFARC detector"),
        ("report", "write the run report, position errors and CCDF tables"),
    ]:
        _add_common(sub.add_parser(name, help=text))
    for name, text in [("run", "full pipeline"), ("calibrate", "empirical thresholds")]:
        p = sub.add_parser(name, help=text)
        _add_common(p, multi=True)
        p.add_argument("--workers", type=int, default=1, help="parallel runs")
    return parser


def _overrides(args):
    return {"seed": args.seed, "imu": args.imu, "attack": args.attack,
            "detector": args.detector, "pf": args.pf, "thresholds": args.thresholds}


def _configs(args):
    paths = args.config if isinstance(args.config, list) else [args.config]
    cfgs = []
    for p in paths:
        cfgs.extend(harness.read_run_configs(p, _overrides(args)))
    return cfgs


STAGES = {
    "simulate": harness.stage_simulate,
    "inject": harness.stage_inject,
    "filter": harness.stage_filter,
    "detect": harness.stage_detect,
    "report": harness.stage_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfgs = _configs(args)
        if args.command == "calibrate":
            best, _ = harness.calibrate(cfgs, args.out, args.workers)
            print(json.dumps(det.thresholds_to_json(best), indent=2, sort_keys=True))
            return 0
        if args.command == "run":
            reports = harness.run_campaign(cfgs, args.out, args.workers)
            for cfg, rep in zip(cfgs, reports):
                r = rep.summary
                print(f"{harness.run_dir(args.out, cfg, len(cfgs) > 1)}  seed={cfg.seed}  "
                      f"epochs={r['epochs']}  H1={r['h1_count']}  "
                      f"time_to_detect={r['time_to_detect_s']}")
            return 0
        many = len(cfgs) > 1
        for cfg in cfgs:
            STAGES[args.command](cfg, harness.run_dir(args.out, cfg, many))
        return 0
    except (harness.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"cpspoof: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
