"""Command-line entry point: ``cogplant node|scenario|query|fit|placement``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from typing import Sequence

from cogplant.errors import CogplantError


def _emit(obj: object) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _token(args: argparse.Namespace) -> str | None:
    from cogplant.node import request_token

    if args.token:
        return args.token
    client = args.client_id or os.environ.get("COGPLANT_CLIENT_ID")
    secret = args.secret or os.environ.get("COGPLANT_SECRET")
    if client and secret:
        return request_token(args.node, client, secret)
    return os.environ.get("COGPLANT_TOKEN")


def cmd_node(args: argparse.Namespace) -> int:
    from cogplant.node import Node, NodeConfig, NodeServer

    cfg = NodeConfig.load(args.config)
    if args.role != cfg.role:
        print(f"config declares role {cfg.role!r}, not {args.role!r}", file=sys.stderr)
        return 2
    server = NodeServer(Node(cfg), args.listen).start()
    print(f"listening {server.address}", flush=True)
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    done.wait()
    server.stop()
    return 0


def cmd_scenario(args: argparse.Namespace) -> int:
    from cogplant.scenario import parse_partition, run_scenario
    from cogplant.sim import ScenarioConfig

    cfg = ScenarioConfig(args.domain, args.seed, args.duration, args.tick_ms, args.anomaly_at)
    partition = parse_partition(args.partition)
    if args.telemetry:
        with open(args.telemetry, "w", encoding="utf-8", newline="\n") as fh:
            report = run_scenario(cfg, partition, fh, inproc=args.inproc)
    else:
        report = run_scenario(cfg, partition, inproc=args.inproc)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    _emit(report.to_dict())
    return report.exit_code


def cmd_query(args: argparse.Namespace) -> int:
    from urllib.parse import urlencode

    from cogplant.node import http_call

    params = {"type": args.type} if args.type else {}
    if args.id_pattern:
        params["idPattern"] = args.id_pattern
    status, doc = http_call("GET", f"{args.node.rstrip('/')}/entities?{urlencode(params)}", token=_token(args))
    _emit(doc)
    return 0 if status == 200 else 1


def cmd_fit(args: argparse.Namespace) -> int:
    from cogplant.node import http_call

    body = {"entityId": args.entity, "target": args.target,
            "inputs": [s for s in args.inputs.split(",") if s], "from": args.from_, "to": args.to}
    status, doc = http_call("POST", args.node.rstrip("/") + "/fit", body, token=_token(args))
    _emit(doc)
    return 0 if status == 200 else 1


def cmd_placement(args: argparse.Namespace) -> int:
    from cogplant.placement import PlacementError, load_problem, plan_placement

    try:
        plan = plan_placement(load_problem(args.problem))
    except (PlacementError, KeyError) as exc:
        print(f"invalid problem: {exc}", file=sys.stderr)
        return 2
    _emit(plan.to_dict())
    return 0 if plan.feasible else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cogplant", description="Cognitive plant platform tools.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("node", help="run an edge or cloud node over HTTP")
    p.add_argument("--role", choices=("edge", "cloud"), required=True)
    p.add_argument("--config", required=True, help="node configuration JSON")
    p.add_argument("--listen", help="host:port override")
    p.set_defaults(func=cmd_node)

    p = sub.add_parser("scenario", help="run a simulated pilot end to end")
    p.add_argument("domain", choices=("asphalt", "steel", "pharma"))
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--duration", type=int, default=600, help="ticks to simulate")
    p.add_argument("--tick-ms", type=int, default=0, help="wall-clock pacing per tick")
    p.add_argument("--anomaly-at", type=int, help="tick at which the step anomaly starts")
    p.add_argument("--inproc", action="store_true", help="run both nodes in this process")
    p.add_argument("--partition", help="ticks from:to during which the edge-cloud link is down")
    p.add_argument("--telemetry", help="write the raw telemetry log here")
    p.add_argument("--report", help="also write the JSON report here")
    p.set_defaults(func=cmd_scenario)

    for name, func, helptext in (("query", cmd_query, "list entities on a node"),
                                 ("fit", cmd_fit, "fit a linear soft sensor from node history")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--node", required=True, help="node base URL, e.g. http://127.0.0.1:8080")
        p.add_argument("--token")
        p.add_argument("--client-id")
        p.add_argument("--secret")
        p.set_defaults(func=func)
        if name == "query":
            p.add_argument("--type")
            p.add_argument("--id-pattern")
        else:
            p.add_argument("--entity", required=True)
            p.add_argument("--target", required=True)
            p.add_argument("--inputs", required=True, help="comma-separated input attributes")
            p.add_argument("--from", dest="from_", required=True)
            p.add_argument("--to", required=True)

    p = sub.add_parser("placement", help="edge/cloud placement tools")
    psub = p.add_subparsers(dest="action", required=True)
    pp = psub.add_parser("plan", help="solve a placement problem")
    pp.add_argument("--problem", required=True)
    pp.set_defaults(func=cmd_placement)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CogplantError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
