"""Command line entry point: ``splitproj run|attack|compare|inspect-trace``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter

from .config import ExperimentConfig, load_config, validate, with_overrides
from .errors import ConfigError, SplitError
from .runner import compare, comparison_table, run, run_clients, run_server

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else validate(ExperimentConfig())
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.transport is not None:
        changes["transport"] = args.transport
    return with_overrides(cfg, **changes) if changes else cfg


def _summary(report: dict) -> str:
    final = report.get("final") or {}
    comm = report["comm"]
    return (f"{report['label']}  seed={report['seed']}  steps={report['trace']['steps']}  "
            f"test_acc={final.get('test_acc')}  cut_bytes={comm['total_bytes']}  "
            f"hash={report['deterministic_hash'][:12]}")


def cmd_run(args, force_attack=False) -> int:
    cfg = _config(args)
    if force_attack and cfg.attack == "none":
        cfg = with_overrides(cfg, attack="decoder")
    if args.listen:
        run_server(cfg, args.listen)
        return EXIT_OK
    if args.connect:
        report = run_clients(cfg, args.connect)
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK
    report = run(cfg)
    print(_summary(report))
    for name, rep in (report.get("attacks") or {}).items():
        print(f"  {name}: " + "  ".join(f"{k}={v:.4g}" for k, v in rep["mean"].items() if v is not None))
    if report.get("detection"):
        det = report["detection"]
        print(f"  detection: flagged={det['flagged']} f1={det['f1']}")
    print(f"  wrote {cfg.out_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        with open(path) as fh:
            reports.append(json.load(fh))
    result = compare(reports)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
    print(comparison_table(result))
    return EXIT_OK


def cmd_inspect(args) -> int:
    steps = []
    with open(args.trace) as fh:
        for line in fh:
            if line.strip():
                steps.append(json.loads(line))
    sizes = Counter()
    clients = Counter()
    for s in steps:
        clients[s["client"]] += 1
        for kind, n in s["msg_sizes"].items():
            sizes[kind] += n
    print(f"steps: {len(steps)}")
    print("clients: " + ", ".join(f"{c}:{n}" for c, n in sorted(clients.items())))
    for kind in sorted(sizes):
        print(f"{kind:>7}: {sizes[kind]} bytes")
    if steps:
        print(f"ce: first {steps[0]['ce']:.6g}  last {steps[-1]['ce']:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitproj", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "train and write a report"),
                           ("attack", "train, then run the configured inversion attack")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--transport", choices=("inproc", "tcp"))
        mode = sp.add_mutually_exclusive_group()
        mode.add_argument("--listen", metavar="ADDR", help="serve the backbone for remote clients")
        mode.add_argument("--connect", metavar="ADDR", help="run the clients against a remote server")
    sp = sub.add_parser("compare", help="tabulate reports against the Raw baseline")
    sp.add_argument("reports", nargs="+", metavar="REPORT")
    sp.add_argument("--json", metavar="PATH")
    sp = sub.add_parser("inspect-trace", help="summarize a trace.jsonl file")
    sp.add_argument("trace", metavar="PATH")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "attack":
            return cmd_run(args, force_attack=True)
        if args.command == "compare":
            return cmd_compare(args)
        return cmd_inspect(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SplitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
