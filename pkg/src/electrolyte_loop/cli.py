"""``campaign`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .analytics import efficiency_report
from .campaign import (
    LOG_NAME,
    best_so_far,
    export_csv,
    read_log,
    replay,
    run_campaign,
    select_candidates,
)
from .config import load_config, load_efficiency_models
from .protocol import serve
from .virtual_lab import new_lab


def _cmd_run(args):
    cfg = load_config(args.config, seed=args.seed, budget=args.budget, transport=args.transport)
    cfg = replace(cfg, out_dir=str(args.out))
    clog = run_campaign(cfg, resume=args.resume)
    summary = dict(clog.summary)
    summary["log"] = str(Path(args.out) / LOG_NAME)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_replay(args):
    identical, rerun = replay(args.log)
    print(json.dumps({"identical": identical, "entries": len(rerun.entries)}, sort_keys=True))
    return 0 if identical else 1


def _cmd_candidates(args):
    print(json.dumps(select_candidates(read_log(args.log)), indent=2))
    return 0


def _cmd_curve(args):
    clog = read_log(args.log)
    if args.format == "json":
        print(json.dumps([{"step": s, "best_so_far": b} for s, b in best_so_far(clog)]))
    elif args.format == "log-csv":
        sys.stdout.write(export_csv(clog))
    else:
        print("step,best_so_far")
        for step, best in best_so_far(clog):
            print(f"{step},{'' if best is None else repr(best)}")
    return 0


def _cmd_efficiency(args):
    human, robot, extra = load_efficiency_models(args.config)
    report = efficiency_report(args.n, human=human, robot=robot, **extra)
    print(report.to_json())
    print(report.table(), file=sys.stderr)
    return 0


def _cmd_serve(args):
    cfg = load_config(args.config, seed=args.seed)
    lab_cfg = cfg.lab_config()
    host = args.host or cfg.host
    port = cfg.port if args.port is None else args.port
    server = serve(new_lab(lab_cfg, cfg.make_feeders()), lab_cfg, host, port)
    print(f"listening on {server.url}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.shutdown()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="campaign", description="Closed-loop electrolyte conductivity campaigns.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a campaign against the virtual lab")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--transport", choices=("loopback", "http"))
    p.add_argument("--resume", action="store_true", help="continue an interrupted log in --out")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("replay", help="re-run a log from its header and compare bytes")
    p.add_argument("--log", type=Path, required=True)
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("candidates", help="apply the default candidate-selection rules")
    p.add_argument("--log", type=Path, required=True)
    p.set_defaults(func=_cmd_candidates)

    p = sub.add_parser("curve", help="best-so-far curve")
    p.add_argument("--log", type=Path, required=True)
    p.add_argument("--format", choices=("csv", "json", "log-csv"), default="csv")
    p.set_defaults(func=_cmd_curve)

    p = sub.add_parser("efficiency", help="time/sample efficiency report")
    p.add_argument("--config", type=Path)
    p.add_argument("--n", type=int, default=40)
    p.set_defaults(func=_cmd_efficiency)

    p = sub.add_parser("serve", help="expose a virtual lab over HTTP")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
