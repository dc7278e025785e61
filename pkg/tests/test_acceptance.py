"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line. Run with ``pytest -s``
(or ``python tests/test_acceptance.py``) to see them.
"""

from __future__ import annotations

import ipaddress
import json
import os
import random
import signal
import socket
import statistics
import subprocess
import sys
import time
from collections import Counter, defaultdict

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from nel_scope import scenarios
from nel_scope.collector import read_records
from nel_scope.controller import (
    ControllerConfig,
    Mode,
    Region,
    ZoneConfig,
    decode_client_hostname,
    encode_client_hostname,
    select_endpoint,
)
from nel_scope.emulator import BrowserEmulator, Outcome
from nel_scope.live import Clock, HttpTransport, UdpResolver
from nel_scope.monitor import AvailabilityMonitor, MonitorConfig
from nel_scope.protocol import (
    decode_report_batch,
    encode_report_batch,
    parse_nel_header,
    parse_report_to_header,
    serialize_nel_header,
    serialize_report_to_header,
)
from nel_scope.simulator import run

from conftest import load_ldns_pairs
from strategies import canonical, groups, ips, policies, reports

PROPERTY = settings(max_examples=1000, derandomize=True, deadline=None,
                    suppress_health_check=[HealthCheck.too_slow])


class Verdict:
    def __init__(self, capsys, number: int, title: str) -> None:
        self.capsys = capsys
        self.number = number
        self.title = title

    def check(self, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {self.number:>2}: {self.title}: {detail}"
        with self.capsys.disabled():
            print(f"\n{line}", flush=True)
        assert ok, line


@pytest.fixture
def verdict(capsys):
    return lambda number, title: Verdict(capsys, number, title)


def region_of(url: str) -> str:
    return url.split("//", 1)[1].split(".", 1)[0]


def latest_before(advertisements, ts):
    current = None
    for a in advertisements:
        if a.ts > ts:
            break
        current = a.region_id
    return current


def test_latest_policy_delivery(verdict):
    v = verdict(1, "delivery follows the latest advertised policy")
    started = time.perf_counter()
    res = run(scenarios.scenario_b(480), scenarios.topology(), seed=0)
    elapsed = time.perf_counter() - started
    ads = sorted(res.advertisements, key=lambda a: a.ts)
    batches = sorted(res.batches().values(), key=lambda b: b[0].ts)
    on_latest = sum(latest_before(ads, b[0].ts) == b[0].region_id for b in batches)
    stale = len(batches) - on_latest
    regions_hit = {b[0].region_id for b in batches}
    ok = bool(batches) and stale == 0 and len(regions_hit) == 4 and elapsed < 1.0
    v.check(ok, f"{on_latest}/{len(batches)} batches on latest region, {stale} stale, "
                f"{len(regions_hit)} regions used, {elapsed:.2f}s")


def test_gateway_region_ordering(verdict):
    v = verdict(2, "lowest median RTT tracks the VPN gateway")
    started = time.perf_counter()
    res = run(scenarios.scenario_a(), scenarios.topology(), seed=0)
    elapsed = time.perf_counter() - started
    topo = scenarios.topology()

    def medians(lo, hi):
        per = defaultdict(list)
        for batch in res.batches().values():
            r = batch[0]
            if lo <= r.ts < hi:
                per[r.region_id].append(r.transport_rtt_ms)
        return {k: statistics.median(vals) for k, vals in per.items()}

    settle = 120
    start, end, _ = scenarios.GATEWAY_PHASES[0]
    baseline = medians(start + settle, end)
    problems = []
    for start, end, gateway in scenarios.GATEWAY_PHASES:
        med = medians(start + settle, end)
        if set(med) != set(scenarios.REGIONS):
            problems.append(f"phase {start}: missing regions {set(scenarios.REGIONS) - set(med)}")
            continue
        local = gateway or min(scenarios.REGIONS, key=lambda r: topo.rtt("pnw", r))
        if min(med, key=med.get) != local:
            problems.append(f"phase {start}: argmin {min(med, key=med.get)} != {local}")
        if gateway is None:
            continue
        to_gateway = topo.rtt("pnw", gateway)
        # regions the client reaches faster directly than via the gateway sit behind it
        behind = [r for r in scenarios.REGIONS if topo.rtt("pnw", r) < to_gateway]
        for r in behind:
            if med[r] - baseline[r] < to_gateway:
                problems.append(f"phase {start}: {r} inflated {med[r] - baseline[r]:.0f} < {to_gateway:.0f}")
    ok = not problems and elapsed < 5.0
    v.check(ok, "; ".join(problems) or f"{len(scenarios.GATEWAY_PHASES)} phases ordered, "
                                        f"inflation holds, {elapsed:.2f}s")


def test_client_resolver_pairs(verdict):
    v = verdict(3, "client/resolver associations match the fixture")
    started = time.perf_counter()
    res = run(scenarios.scenario_c(), scenarios.topology_c(), seed=0)
    elapsed = time.perf_counter() - started
    expected = [(r["client_ip"], r["ldns_ip"], r["self_resolved"]) for r in load_ldns_pairs()]
    got = [(a.client_ip, a.ldns_ip, a.self_resolved) for a in res.associations]
    flagged = {(a.client_ip, a.ldns_ip) for a in res.associations if a.self_resolved}
    ok = (sorted(set(got)) == sorted(expected) and len(got) == len(expected)
          and flagged == {(c, l) for c, l, s in expected if s} and elapsed < 1.0)
    v.check(ok, f"{len(got)} associations recorded, {len(set(got))} distinct, "
                f"self-resolved {sorted(flagged)}, {elapsed:.2f}s")


@pytest.mark.parametrize("n", [1, 2, 4])
def test_multiplexing_bound(verdict, n):
    v = verdict(4, f"multiplexing with N={n}")
    duration = 600
    res = run(scenarios.multiplex_scenario(n, duration), scenarios.topology(), seed=0)
    per_minute = Counter()
    for batch in res.batches().values():
        r = batch[0]
        if r.ts < duration:
            per_minute[(r.client_ip, int(r.ts // 60))] += 1
    counts = [per_minute[(scenarios.PNW_CLIENT, m)] for m in range(duration // 60)]
    ok = counts == [n] * (duration // 60)
    v.check(ok, f"batches per minute {counts}")


def test_sampling_fidelity(verdict):
    v = verdict(5, "success sampling")
    rt = serialize_report_to_header(parse_report_to_header(
        '{"group":"default","max_age":300,"endpoints":[{"url":"https://westus2.neltest.com/report"}]}'))
    results = {}
    for fraction in (0.25, 1.0):
        em = BrowserEmulator(queue_cap=20_000, rng=random.Random(20200601))
        policy = parse_nel_header(json.dumps({"report_to": "default", "max_age": 300,
                                              "success_fraction": fraction}))
        em.install_from_response("img.neltest.com", serialize_nel_header(policy), rt, 0.0)
        for _ in range(10_000):
            em.observe_request("img.neltest.com", Outcome.ok("https://img.neltest.com/corg1.png"), em.rng.random(), 1.0)
        results[fraction] = em.ledger["img.neltest.com"].queued
    ok = abs(results[0.25] - 2500) <= 0.03 * 2500 and results[1.0] == 10_000
    v.check(ok, f"queued {results[0.25]} at 0.25 (target 2500 +/- 75), {results[1.0]} at 1.0")


def test_failover_conservation(verdict):
    v = verdict(6, "failover to the second endpoint")
    res = run(scenarios.failover_scenario(), scenarios.topology(), seed=0)
    uploads = res.upload_records()
    by_region = Counter(r.region_id for r in uploads)
    (em,) = res.emulators.values()
    ledger = em.ledger["img.neltest.com"]
    dropped = ledger.dropped_overflow + ledger.dropped_no_policy + ledger.dropped_removed
    first_attempts = [a for a in res.attempts if region_of(a.url) == "westus2"]
    ok = (set(by_region) == {"northcentralus"} and dropped == 0
          and ledger.queued == len(uploads) + em.pending() and ledger.delivered == len(uploads)
          and all(not a.delivered for a in first_attempts) and first_attempts)
    v.check(bool(ok), f"{by_region['northcentralus']}/{len(uploads)} reports at northcentralus, "
                      f"queued {ledger.queued} = delivered {ledger.delivered} + pending {em.pending()}, "
                      f"dropped {dropped}")


def test_availability_monitor(verdict):
    v = verdict(7, "availability monitor on a regional outage")
    cfg = MonitorConfig()
    outage_start, outage_end = 600, 1200
    res = run(scenarios.scenario_d(outage_start, outage_end), scenarios.topology_d(), seed=0)
    mon = AvailabilityMonitor(cfg)
    mon.ingest_all(res.records)
    mon.evaluate_all(1800)
    trans = sorted(mon.transitions, key=lambda t: (t.ts, t.region_id))
    west = [t for t in trans if t.region_id == "westus2"]
    degraded = [t for t in west if t.new_state.value == "degraded"]
    healthy = [t for t in west if t.new_state.value == "healthy"]
    start_window = (outage_start, outage_start + cfg.window)
    end_window = (outage_end, outage_end + (cfg.r + 1) * cfg.window)

    def inside(ts, window):
        return window[0] <= ts <= window[1]

    ok = (len(degraded) == 1 and inside(degraded[0].ts, start_window)
          and len(healthy) == 1 and inside(healthy[0].ts, end_window)
          and west[-1].new_state.value == "healthy"
          and all(inside(t.ts, start_window) or inside(t.ts, end_window) for t in trans))
    v.check(ok, ", ".join(t.line() for t in trans))


def test_codec_properties(verdict):
    v = verdict(8, "codec roundtrips")
    failures = []

    @PROPERTY
    @given(policies)
    def nel(p):
        assert parse_nel_header(serialize_nel_header(p)) == p

    @PROPERTY
    @given(groups)
    def report_to(g):
        assert parse_report_to_header(serialize_report_to_header(g)) == g

    @PROPERTY
    @given(st.lists(reports, max_size=6))
    def batches(batch):
        assert decode_report_batch(encode_report_batch(batch, 1e6)) == batch

    @PROPERTY
    @given(ips)
    def hostnames(ip):
        assert decode_client_hostname(encode_client_hostname(ip, "neltest.com"), "neltest.com") == canonical(ip)

    for name, prop in [("NEL", nel), ("Report-To", report_to), ("batch", batches), ("hostname", hostnames)]:
        try:
            prop()
        except Exception as exc:  # noqa: BLE001 - collected into the verdict line
            failures.append(f"{name}: {exc!r}"[:200])
    v.check(not failures, "; ".join(failures) or "4 suites x 1000 cases, 0 failures")


def test_sampler_uniformity(verdict):
    v = verdict(9, "endpoint sampler uniformity")
    regions = tuple(Region(r, f"https://{r}.neltest.com/report") for r in scenarios.REGIONS)
    rng = random.Random(99)
    addrs = [str(ipaddress.IPv4Address(rng.getrandbits(32))) for _ in range(10_000)]
    now = 1_591_000_000.0
    picks = [select_endpoint(a, now, regions).region_id for a in addrs]
    again = [select_endpoint(a, now, regions).region_id for a in addrs]
    counts = Counter(picks)
    p = chisquare([counts[r] for r in scenarios.REGIONS]).pvalue
    ok = p > 0.01 and picks == again
    v.check(ok, f"counts {[counts[r] for r in scenarios.REGIONS]}, p={p:.3f}, repeat identical={picks == again}")


def free_port(kind=socket.SOCK_STREAM) -> int:
    with socket.socket(socket.AF_INET, kind) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def alternating_origin(regions, minutes: int) -> float:
    """A minute-aligned virtual time from which 127.0.0.1 switches region every minute."""
    m = int(time.time() // 60)
    while True:
        seq = [select_endpoint("127.0.0.1", (m + i) * 60, regions).region_id for i in range(minutes + 1)]
        if all(a != b for a, b in zip(seq, seq[1:])):
            return m * 60.0
        m += 1


class RecordingTransport(HttpTransport):
    def __init__(self, resolver):
        super().__init__(resolver, timeout=2.0)
        self.events: list[tuple[str, float, str]] = []

    def fetch(self, url, address, now):
        result = super().fetch(url, address, now)
        group = parse_report_to_header(result.headers["Report-To"], allow_insecure=True)
        self.events.append(("advertised", now, region_of(group.endpoints[0].url)))
        return result

    def upload(self, url, payload, now):
        ok = super().upload(url, payload, now)
        if ok:
            self.events.append(("delivered", now, region_of(url)))
        return ok


def test_live_smoke(verdict, tmp_path):
    v = verdict(10, "live serve over loopback sockets")
    wall_started = time.monotonic()
    minutes = 8
    ports = {"westus2": free_port(), "northcentralus": free_port()}
    dns_port = free_port(socket.SOCK_DGRAM)
    regions = tuple(Region(r, f"http://{r}.neltest.com:{p}/report") for r, p in ports.items())
    names = [f"{r}.neltest.com" for r in ports] + ["img.neltest.com"]
    cfg = ControllerConfig(
        base_domain="neltest.com", regions=regions, mode=Mode.REGION_SAMPLING, max_age=300,
        report_scheme="http",
        zone=ZoneConfig(collector_address="127.0.0.1", records={n: ("127.0.0.1",) for n in names}),
    )
    cfg_path = tmp_path / "controller.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))

    virtual_origin = alternating_origin(regions, minutes)
    wall_origin = time.time() + 1.5
    scale = 60.0
    clock = Clock(wall_origin, virtual_origin, scale)
    common = ["--config", str(cfg_path), "--insecure-http", "--timer-scale", str(scale),
              "--clock-origin", f"{wall_origin},{virtual_origin}"]
    commands = [
        ["serve", "--role", "collector,dns", "--region", "westus2", "--listen", f"127.0.0.1:{ports['westus2']}",
         "--dns-listen", f"127.0.0.1:{dns_port}", "--log", str(tmp_path / "westus2.jsonl"),
         "--assoc-log", str(tmp_path / "assoc.jsonl")],
        ["serve", "--role", "collector", "--region", "northcentralus",
         "--listen", f"127.0.0.1:{ports['northcentralus']}", "--log", str(tmp_path / "northcentralus.jsonl")],
    ]
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    procs = [subprocess.Popen([sys.executable, "-m", "nel_scope", *cmd, *common], stdout=subprocess.PIPE,
                              stderr=subprocess.PIPE, text=True, env=env) for cmd in commands]
    try:
        banners = []
        for proc, expected in zip(procs, (2, 1)):
            for _ in range(expected):
                line = proc.stdout.readline()
                if not line.startswith("listening"):
                    raise RuntimeError(f"serve did not start: {line!r} {proc.stderr.read()}")
                banners.append(line.strip())

        resolver = UdpResolver(("127.0.0.1", dns_port))
        transport = RecordingTransport(resolver)
        em = BrowserEmulator(allow_insecure=True)
        page = [f"http://img.neltest.com:{ports['westus2']}/corg1.png"]
        end = virtual_origin + minutes * 60
        t = virtual_origin
        while t <= end:
            clock.sleep_until(t)
            if (t - virtual_origin) % 20 == 0 and t < end:
                em.load_page(page, resolver, transport, t, draws=[0.0])
            em.tick(t, transport)
            t += 1.0
    finally:
        for proc in procs:
            proc.send_signal(signal.SIGTERM)
        outputs = [proc.communicate(timeout=10) for proc in procs]
    wall = time.monotonic() - wall_started

    latest = None
    stale = 0
    delivered = []
    for kind, _, region in transport.events:
        if kind == "advertised":
            latest = region
        else:
            delivered.append(region)
            stale += region != latest
    logged = []
    for region in ports:
        recs = read_records(tmp_path / f"{region}.jsonl")
        batches = {r.batch_id: r for r in recs if r.upload}
        logged += [(r.ts, r.region_id) for r in batches.values()]
    logged_regions = [r for _, r in sorted(logged)]
    stopped = all(out.strip().endswith("stopped") for out, _ in outputs)
    ok = (len(delivered) >= minutes and stale == 0 and logged_regions == delivered
          and set(delivered) == set(ports) and stopped and wall < 30.0)
    v.check(ok, f"{len(delivered) - stale}/{len(delivered)} batches on latest region, "
                f"collector logs agree={logged_regions == delivered}, clean stop={stopped}, {wall:.1f}s wall")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
