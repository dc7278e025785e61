"""``nel-scope`` command line entry point."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import signal
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from nel_scope import __version__
from nel_scope.errors import ConfigError, NelScopeError

log = logging.getLogger("nel_scope")


@dataclass
class RunManifest:
    subcommand: str
    argv: list[str]
    config_paths: dict[str, str]
    output_dir: str | None
    seed: int | None = None
    started_at: float = field(default_factory=time.time)
    version: str = __version__

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _configure_logging() -> None:
    level = os.environ.get("NEL_SCOPE_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _clock(args: argparse.Namespace):
    from nel_scope.live import Clock

    if args.timer_scale == 1.0 and args.clock_origin is None:
        return Clock()
    if args.clock_origin is not None:
        wall, _, virtual = args.clock_origin.partition(",")
        wall_origin, virtual_origin = float(wall), float(virtual or wall)
    else:
        wall_origin = virtual_origin = time.time()
    return Clock(wall_origin, virtual_origin, args.timer_scale)


def cmd_serve(args: argparse.Namespace, argv: list[str]) -> int:
    from nel_scope.collector import Collector, RecordStore
    from nel_scope.controller import load_config
    from nel_scope.dns_associator import AssociationStore, DnsAssociator
    from nel_scope.live import CollectorHTTPServer, DnsUDPServer, parse_addr, start_in_thread

    roles = {r.strip() for r in args.role.split(",") if r.strip()}
    unknown = roles - {"collector", "dns"}
    if not roles or unknown:
        raise ConfigError(f"unknown role(s): {sorted(unknown) or args.role!r}")
    cfg = load_config(args.config)
    if cfg.insecure and not args.insecure_http:
        raise ConfigError("config advertises http:// endpoints; pass --insecure-http to allow that")
    clock = _clock(args)
    log_path = Path(args.log)
    RunManifest("serve", argv, {"config": str(args.config)}, str(log_path.parent)).write(
        log_path.with_name(log_path.name + ".manifest.json"))

    servers = []
    closers = []
    if "collector" in roles:
        if not args.region:
            raise ConfigError("--region is required for the collector role")
        cfg.region(args.region)
        store = RecordStore(log_path)
        closers.append(store.close)
        server = CollectorHTTPServer(parse_addr(args.listen), Collector(args.region, cfg, store), clock)
        servers.append(("collector", server))
    if "dns" in roles:
        dns_addr = args.dns_listen if "collector" in roles else args.dns_listen or args.listen
        if not dns_addr:
            raise ConfigError("--dns-listen is required when serving collector and dns together")
        assoc_log = args.assoc_log or log_path.with_name("associations.jsonl")
        query_log = args.query_log or log_path.with_name("dns-queries.jsonl")
        store = AssociationStore(assoc_log, query_log)
        closers.append(store.close)
        servers.append(("dns", DnsUDPServer(parse_addr(dns_addr), DnsAssociator(cfg.base_domain, cfg.zone, store), clock)))

    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    for role, server in servers:
        start_in_thread(server)
        host, port = server.server_address[:2]
        print(f"listening {role} {host}:{port}", flush=True)
    stop.wait()
    for _, server in servers:
        server.shutdown()
        server.server_close()
    for close in closers:
        close()
    print("stopped", flush=True)
    return 0


def cmd_simulate(args: argparse.Namespace, argv: list[str]) -> int:
    from nel_scope.simulator import Scenario, Topology, load_json, run

    scenario = Scenario.from_dict(load_json(args.scenario))
    topology = Topology.from_dict(load_json(args.topology))
    out = Path(args.out)
    RunManifest("simulate", argv, {"scenario": str(args.scenario), "topology": str(args.topology)},
                str(out), seed=args.seed).write(out / "manifest.json")
    result = run(scenario, topology, args.seed)
    for path in result.write(out):
        log.info("wrote %s", path)
    return 0


def cmd_monitor(args: argparse.Namespace, argv: list[str]) -> int:
    from nel_scope.collector import read_records
    from nel_scope.monitor import AvailabilityMonitor, MonitorConfig

    try:
        cfg = MonitorConfig(args.window, args.k, args.theta_low, args.theta_high, args.r)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        records = read_records(args.log)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.log}: {exc}") from exc
    monitor = AvailabilityMonitor(cfg)
    monitor.ingest_all(records)
    uploads = [r.ts for r in records if r.upload]
    if args.until is not None:
        until = args.until
    else:
        until = ((max(uploads) // cfg.window) + 1) * cfg.window if uploads else 0.0
    monitor.evaluate_all(until)
    print("ts,region_id,old_state,new_state")
    for t in sorted(monitor.transitions, key=lambda t: (t.ts, t.region_id)):
        print(t.line())
    return 0


def cmd_assoc_dump(args: argparse.Namespace, argv: list[str]) -> int:
    from nel_scope.controller import canonical_ip
    from nel_scope.dns_associator import associations_csv, read_associations

    try:
        rows = read_associations(args.log)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.log}: {exc}") from exc
    if args.client:
        client = canonical_ip(args.client)
        rows = [a for a in rows if a.client_ip == client]
    associations_csv(rows, sys.stdout)
    return 0


def cmd_export_plot(args: argparse.Namespace, argv: list[str]) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    timeline = Path(args.timeline)
    try:
        with timeline.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {timeline}: {exc}") from exc
    series: dict[str, list[tuple[int, float]]] = {}
    for row in rows:
        points = series.setdefault(row["region_id"], [])
        if row["median_rtt_ms"]:
            points.append((int(row["minute"]), float(row["median_rtt_ms"])))
    out = Path(args.out) if args.out else timeline.with_suffix(".svg")
    plt.rcParams["svg.hashsalt"] = "nel-scope"
    fig, ax = plt.subplots(figsize=(9, 4))
    for region, points in series.items():
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        (line,) = ax.plot(xs, ys, marker=".", label=region)
        line.set_gid(f"series-{region}")
    ax.set_xlabel("minute")
    ax.set_ylabel("median RTT (ms)")
    ax.legend(loc="upper left", fontsize="small")
    fig.tight_layout()
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, metadata={"Date": None} if out.suffix == ".svg" else None)
    plt.close(fig)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nel-scope", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run collector and/or authoritative DNS listeners")
    s.add_argument("--role", required=True, help="collector, dns, or collector,dns")
    s.add_argument("--region", help="region id of this collector instance")
    s.add_argument("--listen", required=True, help="host:port of the collector (or of dns when it is the only role)")
    s.add_argument("--dns-listen", help="host:port of the UDP DNS listener when both roles run")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--log", required=True, help="records log (JSON lines)")
    s.add_argument("--assoc-log", help="association log (default: associations.jsonl beside --log)")
    s.add_argument("--query-log", help="raw DNS query log (default: dns-queries.jsonl beside --log)")
    s.add_argument("--insecure-http", action="store_true", help="allow http:// report endpoints")
    s.add_argument("--timer-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    s.add_argument("--clock-origin", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("simulate", help="run a scenario on the virtual-clock simulator")
    s.add_argument("--scenario", required=True, type=Path)
    s.add_argument("--topology", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("monitor", help="replay a records log through the availability monitor")
    s.add_argument("--log", required=True, type=Path)
    s.add_argument("--window", type=float, default=60.0)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--theta-low", type=float, default=0.5)
    s.add_argument("--theta-high", type=float, default=0.8)
    s.add_argument("--r", type=int, default=3)
    s.add_argument("--until", type=float, help="evaluate windows closing up to this time")
    s.set_defaults(func=cmd_monitor)

    s = sub.add_parser("assoc", help="client/LDNS association tools")
    assoc = s.add_subparsers(dest="assoc_command", required=True)
    d = assoc.add_parser("dump", help="print associations as CSV")
    d.add_argument("--log", default="associations.jsonl", type=Path)
    d.add_argument("--client")
    d.set_defaults(func=cmd_assoc_dump)

    s = sub.add_parser("export-plot", help="render timeline.csv as per-region RTT series")
    s.add_argument("timeline", type=Path)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_export_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except (NelScopeError, OSError) as exc:
        print(f"nel-scope: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
