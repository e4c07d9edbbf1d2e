"""Command line: train-models, attack, serve-oracle, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from leba import harness, nets
from leba import oracle as O

OUTPUT_ENV = "LEBA_OUTPUT_DIR"


def _default_output() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


def _cmd_train_models(args) -> int:
    report = harness.train_models(args.dataset, args.models, seed=args.seed)
    print(json.dumps(report, indent=2))
    return 0


def _cmd_attack(args) -> int:
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(harness.ExperimentConfig)
        if getattr(args, f.name, None) is not None
    }
    in_file = args.config and any(
        line.split("#", 1)[0].split("=", 1)[0].strip() == "output" for line in Path(args.config).read_text().splitlines()
    )
    if "output" not in overrides and not in_file:
        overrides["output"] = str(Path(_default_output()) / overrides.get("variant", "run"))
    cfg = harness.read_config(args.config, overrides)
    result = harness.run_and_report(cfg)
    sys.stdout.write(harness.rows_to_csv(result.rows))
    return 0


def _cmd_serve(args) -> int:
    victim = nets.load_any(args.victim)
    oracle = O.wrap_defense(victim, O.DefenseSpec.parse(args.defense), args.max_queries)
    host, port = O.parse_endpoint(args.endpoint)
    server = O.OracleServer(oracle, host, port)
    print(f"serving {args.victim} ({args.defense}) on {server.endpoint}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        print(f"queries served: {oracle.used}")
    return 0


def _cmd_report(args) -> int:
    rows = []
    for path in args.runs:
        p = Path(path)
        rows.extend(harness.read_metrics_csv(p / "metrics.csv" if p.is_dir() else p))
    print(f"{'variant':<12} {'seed':>5} {'n':>5} {'ASR':>8} {'AVG.Q':>10} {'AVG.Q_':>10}")
    for r in rows:
        seed = "all" if r.seed is None else str(r.seed)
        print(f"{r.variant:<12} {seed:>5} {r.n:>5} {r.asr:>8.4f} {r.avg_q:>10.2f} {r.avg_q_prime:>10.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="leba", description="Learnable black-box attack experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-models", help="build the desk dataset and train victim/surrogate models")
    p.add_argument("--dataset", default="data/desk")
    p.add_argument("--models", default="models")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_models)

    p = sub.add_parser("attack", help="run one attack variant over the attack set")
    p.add_argument("--config", help="key = value config file; flags override it")
    for f in fields(harness.ExperimentConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, metavar=f.name.upper(), default=None)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("serve-oracle", help="expose a victim over the wire protocol")
    p.add_argument("--victim", required=True)
    p.add_argument("--defense", default="none")
    p.add_argument("--endpoint", default="127.0.0.1:5757")
    p.add_argument("--max-queries", type=int, default=None)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("report", help="print metrics from run directories or CSV files")
    p.add_argument("runs", nargs="+")
    p.set_defaults(func=_cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
