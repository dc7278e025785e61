"""Deterministic discrete-event harness around the real collector, DNS and emulator code.

Clients are :class:`~nel_scope.emulator.BrowserEmulator` instances. Their DNS
lookups are turned into wire-format queries sent "from" the client's resolver
address to the :class:`~nel_scope.dns_associator.DnsAssociator`, and their HTTP
requests are handed straight to :class:`~nel_scope.collector.Collector` objects
with the path RTT of the current topology state. Nothing reads the wall clock.

At equal timestamps scenario events run before emulator ticks, and scenario
events keep their declaration order.
"""

from __future__ import annotations

import csv
import heapq
import io
import itertools
import json
import random
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable
from urllib.parse import urlsplit

from nel_scope.collector import Collector, MeasurementRecord, RecordStore
from nel_scope.controller import ControllerConfig, RequestContext, canonical_ip
from nel_scope.dns_associator import (
    AssociationStore,
    ClientLdnsAssociation,
    DnsAssociator,
    associations_csv,
    make_query,
    parse_response,
)
from nel_scope.emulator import BrowserEmulator, FetchError, FetchResult
from nel_scope.errors import ConfigError
from nel_scope.protocol import REPORTS_CONTENT_TYPE

EVENT_TYPES = ("set_gateway", "set_outage", "load_page", "rotate_endpoints", "set_ldns")
ALL_CLIENTS = "*"


@dataclass(frozen=True)
class RegionSpec:
    region_id: str
    address: str


@dataclass(frozen=True)
class ClientSpec:
    client_ip: str
    vantage: str
    gateway: str | None = None


@dataclass
class Topology:
    regions: tuple[RegionSpec, ...]
    clients: tuple[ClientSpec, ...]
    rtt_matrix: dict[tuple[str, str], float]
    ldns_map: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.regions = tuple(self.regions)
        self.clients = tuple(ClientSpec(canonical_ip(c.client_ip), c.vantage, c.gateway) for c in self.clients)
        self.ldns_map = {canonical_ip(k): canonical_ip(v) for k, v in self.ldns_map.items()}
        if not self.regions:
            raise ConfigError("topology needs at least one region")
        if len({r.region_id for r in self.regions}) != len(self.regions):
            raise ConfigError("duplicate region ids in topology")
        for (a, b), ms in self.rtt_matrix.items():
            if not ms > 0:
                raise ConfigError(f"rtt {a}->{b} must be positive, got {ms}")
        for c in self.clients:
            for r in self.regions:
                self.rtt(c.vantage, r.region_id)
            if c.gateway is not None:
                self._check_gateway(c.vantage, c.gateway)

    def rtt(self, a: str, b: str) -> float:
        if (a, b) in self.rtt_matrix:
            return self.rtt_matrix[(a, b)]
        if (b, a) in self.rtt_matrix:
            return self.rtt_matrix[(b, a)]
        raise ConfigError(f"no rtt declared between {a!r} and {b!r}")

    def _check_gateway(self, vantage: str, gateway: str) -> None:
        self.rtt(vantage, gateway)
        for r in self.regions:
            self.rtt(gateway, r.region_id)

    def region_ids(self) -> list[str]:
        return [r.region_id for r in self.regions]

    def client(self, client_ip: str) -> ClientSpec:
        ip = canonical_ip(client_ip)
        for c in self.clients:
            if c.client_ip == ip:
                return c
        raise ConfigError(f"unknown client {client_ip!r}")

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> Topology:
        try:
            return cls(
                regions=tuple(RegionSpec(r["region_id"], canonical_ip(r["address"])) for r in obj["regions"]),
                clients=tuple(ClientSpec(c["client_ip"], c["vantage"], c.get("gateway")) for c in obj["clients"]),
                rtt_matrix={(a, b): float(ms) for a, b, ms in obj["rtt_matrix"]},
                ldns_map=dict(obj.get("ldns_map", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid topology: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "regions": [{"region_id": r.region_id, "address": r.address} for r in self.regions],
            "clients": [
                {"client_ip": c.client_ip, "vantage": c.vantage, **({"gateway": c.gateway} if c.gateway else {})}
                for c in self.clients
            ],
            "rtt_matrix": [[a, b, ms] for (a, b), ms in self.rtt_matrix.items()],
            "ldns_map": dict(self.ldns_map),
        }


@dataclass(frozen=True)
class Event:
    t: float
    type: str
    args: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"t": self.t, "type": self.type, **self.args}


@dataclass
class Scenario:
    name: str
    duration: float
    controller: ControllerConfig
    pages: dict[str, list[str]]
    events: list[Event]
    tick_interval: float = 1.0

    def __post_init__(self) -> None:
        if self.duration <= 0 or self.tick_interval <= 0:
            raise ConfigError("duration and tick_interval must be positive")
        for e in self.events:
            if e.type not in EVENT_TYPES:
                raise ConfigError(f"unknown event type {e.type!r}")
        # stable: ties keep declaration order
        self.events = sorted(self.events, key=lambda e: e.t)

    def validate(self, topology: Topology) -> None:
        region_ids = set(topology.region_ids())
        for r in self.controller.regions:
            if r.region_id not in region_ids:
                raise ConfigError(f"controller region {r.region_id!r} not in topology")
        for e in self.events:
            clients = e.args.get("client", ALL_CLIENTS)
            targets = topology.clients if clients == ALL_CLIENTS else [topology.client(c) for c in _as_list(clients)]
            if e.type == "load_page" and e.args.get("page") not in self.pages:
                raise ConfigError(f"event at t={e.t} names unknown page {e.args.get('page')!r}")
            if e.type == "set_outage" and e.args.get("region") not in region_ids:
                raise ConfigError(f"event at t={e.t} names unknown region {e.args.get('region')!r}")
            if e.type == "set_gateway" and e.args.get("gateway") is not None:
                for c in targets:
                    topology._check_gateway(c.vantage, e.args["gateway"])
            if e.type == "set_ldns":
                canonical_ip(e.args["ldns"])

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> Scenario:
        try:
            events = []
            for raw in obj["events"]:
                raw = dict(raw)
                t0 = float(raw.pop("t"))
                kind = raw.pop("type")
                every = raw.pop("every", None)
                until = raw.pop("until", None)
                if every is None:
                    events.append(Event(t0, kind, raw))
                else:
                    if until is None:
                        until = obj["duration"]
                    for k in itertools.count():
                        t = t0 + k * float(every)
                        if t >= float(until):
                            break
                        events.append(Event(t, kind, dict(raw)))
            return cls(
                name=obj["name"],
                duration=float(obj["duration"]),
                controller=ControllerConfig.from_dict(obj["controller"]),
                pages={k: list(v) for k, v in obj["pages"].items()},
                events=events,
                tick_interval=float(obj.get("tick_interval", 1.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid scenario: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "duration": self.duration,
            "tick_interval": self.tick_interval,
            "controller": self.controller.to_dict(),
            "pages": self.pages,
            "events": [e.to_dict() for e in self.events],
        }


def _as_list(value: Any) -> list:
    return value if isinstance(value, list) else [value]


def load_json(path: str | Path) -> dict[str, Any]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return obj


@dataclass(frozen=True)
class Advertisement:
    ts: float
    client_ip: str
    host: str
    region_id: str | None


@dataclass(frozen=True)
class UploadAttempt:
    ts: float
    client_ip: str
    url: str
    region_id: str | None
    delivered: bool
    reason: str = ""


@dataclass(frozen=True)
class TimelineRow:
    minute: int
    region_id: str
    median_rtt_ms: float | None
    upload_count: int


class Network:
    """Mutable path state: VPN gateways, regional outages, resolver assignment."""

    def __init__(self, topology: Topology) -> None:
        self.topology = topology
        self.gateways: dict[str, str | None] = {c.client_ip: c.gateway for c in topology.clients}
        self.outages: set[str] = set()
        self.ldns: dict[str, str] = dict(topology.ldns_map)

    def effective_rtt(self, client_ip: str, region_id: str, now: float | None = None) -> float | None:
        """Path RTT in ms, or ``None`` when the region is unreachable."""
        client = self.topology.client(client_ip)
        if region_id not in self.topology.region_ids():
            raise ConfigError(f"unknown region {region_id!r}")
        gateway = self.gateways.get(client.client_ip)
        if gateway is None:
            rtt = self.topology.rtt(client.vantage, region_id)
        else:
            rtt = self.topology.rtt(client.vantage, gateway) + self.topology.rtt(gateway, region_id)
        if region_id in self.outages:
            return None
        return rtt


def effective_rtt(topology: Topology, client_ip: str, region_id: str, now: float = 0.0,
                  gateway: str | None = None, outages: Iterable[str] = ()) -> float | None:
    net = Network(topology)
    net.gateways[canonical_ip(client_ip)] = gateway
    net.outages = set(outages)
    return net.effective_rtt(client_ip, region_id, now)


class _SimResolver:
    def __init__(self, sim: Simulation, client_ip: str) -> None:
        self.sim = sim
        self.client_ip = client_ip

    def resolve(self, host: str, now: float) -> str | None:
        ldns = self.sim.network.ldns.get(self.client_ip)
        if ldns is None:
            return None
        query = make_query(host, "A", query_id=next(self.sim._query_ids) & 0xFFFF)
        data = self.sim.associator.handle_datagram(query, ldns, now)
        if data is None:
            return None
        rcode, addresses = parse_response(data)
        if rcode != "NOERROR" or not addresses:
            return None
        return addresses[0]


class _SimTransport:
    def __init__(self, sim: Simulation, client_ip: str, resolver: _SimResolver) -> None:
        self.sim = sim
        self.client_ip = client_ip
        self.resolver = resolver

    def _route(self, address: str, now: float) -> tuple[Collector, float]:
        collector = self.sim.collectors_by_address.get(address)
        if collector is None:
            raise FetchError("tcp.address_unreachable", "connection", server_ip=address)
        rtt = self.sim.network.effective_rtt(self.client_ip, collector.region_id, now)
        if rtt is None:
            raise FetchError("tcp.timed_out", "connection", server_ip=address)
        return collector, rtt

    def fetch(self, url: str, address: str, now: float) -> FetchResult:
        parts = urlsplit(url)
        collector, rtt = self._route(address, now)
        resp = collector.handle_request(
            "GET", parts.path or "/", {"Host": parts.netloc}, b"", self.client_ip, now, rtt
        )
        return FetchResult(resp.status, resp.headers, rtt, server_ip=address)

    def upload(self, url: str, payload: bytes, now: float) -> bool:
        parts = urlsplit(url)
        address = self.resolver.resolve(parts.hostname or "", now)
        if address is None:
            self.sim._attempt(now, self.client_ip, url, None, False, "dns")
            return False
        try:
            collector, rtt = self._route(address, now)
        except FetchError as exc:
            region = self.sim.region_by_address.get(address)
            self.sim._attempt(now, self.client_ip, url, region, False, exc.nel_type)
            return False
        headers = {"Host": parts.netloc, "Content-Type": REPORTS_CONTENT_TYPE}
        resp = collector.handle_request("POST", parts.path or "/", headers, payload, self.client_ip, now, rtt)
        ok = resp.status == 200
        self.sim._attempt(now, self.client_ip, url, collector.region_id, ok, "" if ok else f"http {resp.status}")
        return ok


@dataclass
class SimulationResult:
    records: list[MeasurementRecord]
    associations: list[ClientLdnsAssociation]
    timeline: list[TimelineRow]
    advertisements: list[Advertisement]
    attempts: list[UploadAttempt]
    emulators: dict[str, BrowserEmulator]
    association_store: AssociationStore

    def upload_records(self) -> list[MeasurementRecord]:
        return [r for r in self.records if r.upload]

    def batches(self) -> dict[str, list[MeasurementRecord]]:
        out: dict[str, list[MeasurementRecord]] = {}
        for r in self.records:
            if r.upload and r.batch_id is not None:
                out.setdefault(r.batch_id, []).append(r)
        return out

    def records_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)

    def associations_csv(self) -> str:
        return associations_csv(self.associations)

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["minute", "region_id", "median_rtt_ms", "upload_count"])
        for row in self.timeline:
            median = "" if row.median_rtt_ms is None else f"{row.median_rtt_ms:.3f}"
            w.writerow([row.minute, row.region_id, median, row.upload_count])
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "records.jsonl": self.records_jsonl(),
            "associations.csv": self.associations_csv(),
            "timeline.csv": self.timeline_csv(),
        }
        paths = []
        for name, text in files.items():
            p = out / name
            p.write_text(text, encoding="utf-8")
            paths.append(p)
        return paths


def build_timeline(records: Iterable[MeasurementRecord], region_ids: list[str], duration: float) -> list[TimelineRow]:
    per_batch: dict[str, MeasurementRecord] = {}
    for r in records:
        if r.upload and r.batch_id is not None:
            per_batch.setdefault(r.batch_id, r)
    rtts: dict[tuple[int, str], list[float]] = defaultdict(list)
    for r in per_batch.values():
        rtts[(int(r.ts // 60), r.region_id)].append(r.transport_rtt_ms)
    minutes = int(-(-duration // 60))
    rows = []
    for m in range(minutes):
        for rid in region_ids:
            values = rtts.get((m, rid), [])
            rows.append(TimelineRow(m, rid, statistics.median(values) if values else None, len(values)))
    return rows


class Simulation:
    def __init__(self, scenario: Scenario, topology: Topology, seed: int = 0) -> None:
        scenario.validate(topology)
        self.scenario = scenario
        self.topology = topology
        self.seed = seed
        self.network = Network(topology)
        self.store = RecordStore()
        cfg = self.controller = scenario.controller
        self.assoc_store = AssociationStore()
        self.associator = DnsAssociator(cfg.base_domain, cfg.zone, self.assoc_store)
        self.collectors: dict[str, Collector] = {}
        self.collectors_by_address: dict[str, Collector] = {}
        self.region_by_address: dict[str, str] = {}
        self.advertisements: list[Advertisement] = []
        self.attempts: list[UploadAttempt] = []
        self._query_ids = itertools.count(1)
        for spec in topology.regions:
            c = Collector(spec.region_id, cfg, self.store)
            c.on_policy = self._advertised
            self.collectors[spec.region_id] = c
            self.collectors_by_address[spec.address] = c
            self.region_by_address[spec.address] = spec.region_id
        self.emulators: dict[str, BrowserEmulator] = {}
        self._resolvers: dict[str, _SimResolver] = {}
        self._transports: dict[str, _SimTransport] = {}
        for client in topology.clients:
            ip = client.client_ip
            self.emulators[ip] = BrowserEmulator(allow_insecure=cfg.insecure, rng=random.Random(f"{seed}:{ip}"))
            self._resolvers[ip] = _SimResolver(self, ip)
            self._transports[ip] = _SimTransport(self, ip, self._resolvers[ip])
        self.now = 0.0

    def client_stack(self, client_ip: str) -> tuple[_SimResolver, _SimTransport]:
        """Resolver and transport a client uses, for driving an emulator by hand."""
        ip = canonical_ip(client_ip)
        return self._resolvers[ip], self._transports[ip]

    def _advertised(self, ctx: RequestContext, region_id: str | None) -> None:
        self.advertisements.append(Advertisement(ctx.now, ctx.client_ip, ctx.host, region_id))

    def _attempt(self, ts: float, client_ip: str, url: str, region: str | None, ok: bool, reason: str) -> None:
        self.attempts.append(UploadAttempt(ts, client_ip, url, region, ok, reason))

    def _targets(self, event: Event) -> list[str]:
        clients = event.args.get("client", ALL_CLIENTS)
        if clients == ALL_CLIENTS:
            return [c.client_ip for c in self.topology.clients]
        return [canonical_ip(c) for c in _as_list(clients)]

    def _apply(self, event: Event) -> None:
        t, args = event.t, event.args
        if event.type == "load_page":
            page = self.scenario.pages[args["page"]]
            for ip in self._targets(event):
                self.emulators[ip].load_page(page, self._resolvers[ip], self._transports[ip], t)
        elif event.type == "set_gateway":
            for ip in self._targets(event):
                self.network.gateways[ip] = args.get("gateway")
        elif event.type == "set_outage":
            if args.get("on", True):
                self.network.outages.add(args["region"])
            else:
                self.network.outages.discard(args["region"])
        elif event.type == "rotate_endpoints":
            cfg = self.controller.rotated(int(args.get("steps", 1)))
            self.controller = cfg
            for c in self.collectors.values():
                c.config = cfg
        elif event.type == "set_ldns":
            for ip in self._targets(event):
                self.network.ldns[ip] = canonical_ip(args["ldns"])

    def run(self) -> SimulationResult:
        heap: list[tuple[float, int, int, Any]] = []
        seq = itertools.count()
        for e in self.scenario.events:
            if e.t <= self.scenario.duration:
                heapq.heappush(heap, (e.t, 0, next(seq), e))
        heapq.heappush(heap, (0.0, 1, next(seq), 0))
        while heap:
            t, kind, _, payload = heapq.heappop(heap)
            if t < self.now:
                raise RuntimeError("virtual clock moved backwards")
            self.now = t
            if kind == 0:
                self._apply(payload)
                continue
            for ip in sorted(self.emulators):
                self.emulators[ip].tick(t, self._transports[ip])
            k = payload + 1
            t_next = k * self.scenario.tick_interval
            if t_next <= self.scenario.duration:
                heapq.heappush(heap, (t_next, 1, next(seq), k))
        records = self.store.query()
        return SimulationResult(
            records=records,
            associations=self.assoc_store.associations(),
            timeline=build_timeline(records, self.topology.region_ids(), self.scenario.duration),
            advertisements=list(self.advertisements),
            attempts=list(self.attempts),
            emulators=self.emulators,
            association_store=self.assoc_store,
        )


def run(scenario: Scenario, topology: Topology, seed: int = 0) -> SimulationResult:
    return Simulation(scenario, topology, seed).run()
