"""Builtin topologies and scenarios reproducing the four-region testbed experiments.

RTTs below are harness settings chosen to follow geographic distance from a
Pacific Northwest vantage point; they are not measured values.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from nel_scope.controller import ControllerConfig, Mode, Region, ZoneConfig
from nel_scope.simulator import ClientSpec, Event, RegionSpec, Scenario, Topology

BASE_DOMAIN = "neltest.com"

REGIONS = ("westus2", "northcentralus", "francecentral", "southeastasia")
REGION_ADDRESSES = {
    "westus2": "10.0.1.1",
    "northcentralus": "10.0.2.1",
    "francecentral": "10.0.3.1",
    "southeastasia": "10.0.4.1",
}

# one-way symmetric entries, milliseconds
RTT_MS: dict[tuple[str, str], float] = {
    ("pnw", "westus2"): 10,
    ("pnw", "northcentralus"): 50,
    ("pnw", "francecentral"): 140,
    ("pnw", "southeastasia"): 180,
    ("westus2", "westus2"): 2,
    ("northcentralus", "northcentralus"): 2,
    ("francecentral", "francecentral"): 2,
    ("southeastasia", "southeastasia"): 2,
    ("westus2", "northcentralus"): 45,
    ("westus2", "francecentral"): 135,
    ("westus2", "southeastasia"): 170,
    ("northcentralus", "francecentral"): 100,
    ("northcentralus", "southeastasia"): 210,
    ("francecentral", "southeastasia"): 160,
    ("east-us", "westus2"): 70,
    ("east-us", "northcentralus"): 25,
    ("east-us", "francecentral"): 85,
    ("east-us", "southeastasia"): 230,
    ("west-us", "westus2"): 25,
    ("west-us", "northcentralus"): 55,
    ("west-us", "francecentral"): 150,
    ("west-us", "southeastasia"): 165,
    ("paris-vpn", "westus2"): 140,
    ("paris-vpn", "northcentralus"): 100,
    ("paris-vpn", "francecentral"): 5,
    ("paris-vpn", "southeastasia"): 160,
}

PNW_CLIENT = "100.99.98.1"
PNW_LDNS = "100.99.0.53"

# (client, resolver) pairs observed for three volunteers; the East and
# West clients' /24 prefixes are completed with an arbitrary host number.
LDNS_PAIRS = (
    ("74.73.110.17", "25.29.108.103"),
    ("74.73.110.17", "173.194.168.196"),
    ("172.116.225.42", "66.75.177.68"),
    ("172.116.225.42", "172.253.0.2"),
    ("194.99.106.150", "194.99.106.150"),
)

GATEWAY_PHASES = (
    (0, 900, None),
    (900, 1800, "northcentralus"),
    (1800, 2700, "francecentral"),
    (2700, 3600, "southeastasia"),
    (3600, 4200, None),
)


def zone(extra: dict[str, list[str]] | None = None, collector: str = "westus2") -> ZoneConfig:
    records = {f"{r}.{BASE_DOMAIN}": (REGION_ADDRESSES[r],) for r in REGIONS}
    records[f"*.westus2.{BASE_DOMAIN}"] = (REGION_ADDRESSES["westus2"],)
    records[f"*.{BASE_DOMAIN}"] = (REGION_ADDRESSES["westus2"],)
    for name, addrs in (extra or {}).items():
        records[name] = tuple(addrs)
    return ZoneConfig(collector_address=REGION_ADDRESSES[collector], records=records)


def controller(mode: Mode, regions=REGIONS, **kw) -> ControllerConfig:
    kw.setdefault("zone", zone())
    return ControllerConfig(
        base_domain=BASE_DOMAIN,
        regions=tuple(Region(r, f"https://{r}.{BASE_DOMAIN}/report") for r in regions),
        mode=mode,
        **kw,
    )


def topology(clients: list[ClientSpec] | None = None, ldns_map: dict[str, str] | None = None) -> Topology:
    if clients is None:
        clients = [ClientSpec(PNW_CLIENT, "pnw")]
        ldns_map = {PNW_CLIENT: PNW_LDNS}
    return Topology(
        regions=tuple(RegionSpec(r, REGION_ADDRESSES[r]) for r in REGIONS),
        clients=tuple(clients),
        rtt_matrix=dict(RTT_MS),
        ldns_map=ldns_map or {},
    )


def _every(t0: float, every: float, until: float, kind: str, **args) -> list[Event]:
    out = []
    t = t0
    while t < until:
        out.append(Event(t, kind, dict(args)))
        t += every
    return out


def scenario_a() -> Scenario:
    """Four region-pinned images reloaded every minute while the VPN gateway changes."""
    duration = 4200
    events = [Event(start, "set_gateway", {"client": PNW_CLIENT, "gateway": gw})
              for start, _, gw in GATEWAY_PHASES if start > 0]
    events += _every(0, 60, duration, "load_page", client=PNW_CLIENT, page="regions")
    return Scenario(
        name="alternate-regions",
        duration=duration,
        controller=controller(Mode.REGION_SAMPLING, subdomain_count=4),
        pages={"regions": [f"https://{r}.westus2.{BASE_DOMAIN}/corg1.png" for r in REGIONS]},
        events=events,
    )


def scenario_b(duration: float = 480) -> Scenario:
    """One image reloaded every 20 s; the advertised endpoint rotates every minute."""
    events = _every(60, 60, duration, "rotate_endpoints")
    events += _every(0, 20, duration, "load_page", client=PNW_CLIENT, page="image")
    return Scenario(
        name="policy-rotation",
        duration=duration,
        controller=controller(Mode.FIXED, max_age=300),
        pages={"image": [f"https://img.{BASE_DOMAIN}/corg1.png"]},
        events=events,
    )


def topology_c() -> Topology:
    clients = [
        ClientSpec("74.73.110.17", "east-us"),
        ClientSpec("172.116.225.42", "west-us"),
        ClientSpec("194.99.106.150", "paris-vpn"),
    ]
    first = {}
    for client, ldns in LDNS_PAIRS:
        first.setdefault(client, ldns)
    return topology(clients, first)


def scenario_c() -> Scenario:
    """Each volunteer loads the page with the ISP resolver, then again after switching resolver."""
    switched = {}
    seen = set()
    for client, ldns in LDNS_PAIRS:
        if client in seen:
            switched[client] = ldns
        seen.add(client)
    events = [Event(0, "load_page", {"client": "*", "page": "test"})]
    for client, ldns in switched.items():
        events.append(Event(120, "set_ldns", {"client": client, "ldns": ldns}))
        events.append(Event(120, "load_page", {"client": client, "page": "test"}))
    return Scenario(
        name="client-ldns",
        duration=300,
        controller=controller(Mode.LDNS_ASSOCIATION),
        pages={"test": [f"https://www.{BASE_DOMAIN}/corg1.png"]},
        events=events,
    )


def topology_d(n_clients: int = 20) -> Topology:
    clients = [ClientSpec(f"100.64.0.{i + 1}", "pnw") for i in range(n_clients)]
    return topology(clients, {c.client_ip: PNW_LDNS for c in clients})


def scenario_d(outage_start: float = 600, outage_end: float = 1200, duration: float = 1800) -> Scenario:
    """westus2 goes dark for ten minutes; uploads fail over to northcentralus meanwhile."""
    cfg = controller(
        Mode.FIXED,
        regions=("westus2", "northcentralus"),
        failover_endpoints=1,
        zone=zone({f"img.{BASE_DOMAIN}": [REGION_ADDRESSES["northcentralus"]]}),
    )
    events = [
        Event(outage_start, "set_outage", {"region": "westus2", "on": True}),
        Event(outage_end, "set_outage", {"region": "westus2", "on": False}),
    ]
    events += _every(0, 20, duration, "load_page", page="image")
    return Scenario(
        name="outage",
        duration=duration,
        controller=cfg,
        pages={"image": [f"https://img.{BASE_DOMAIN}/corg1.png"]},
        events=events,
    )


def multiplex_scenario(n: int, duration: float = 600) -> Scenario:
    """``n`` multiplexed subdomains ``s0..s{n-1}`` on one page, reloaded every 20 s."""
    return Scenario(
        name=f"multiplex-{n}",
        duration=duration,
        controller=controller(Mode.REGION_SAMPLING, subdomain_count=n),
        pages={"page": [f"https://s{i}.{BASE_DOMAIN}/corg1.png" for i in range(n)]},
        events=_every(0, 20, duration, "load_page", client=PNW_CLIENT, page="page"),
    )


def failover_scenario(duration: float = 600) -> Scenario:
    """The first endpoint is unreachable for the whole run."""
    cfg = controller(
        Mode.FIXED,
        regions=("westus2", "northcentralus"),
        failover_endpoints=1,
        zone=zone({f"img.{BASE_DOMAIN}": [REGION_ADDRESSES["francecentral"]]}),
    )
    events = [Event(0, "set_outage", {"region": "westus2", "on": True})]
    events += _every(0, 20, duration, "load_page", client=PNW_CLIENT, page="image")
    return Scenario(
        name="failover",
        duration=duration,
        controller=cfg,
        pages={"image": [f"https://img.{BASE_DOMAIN}/corg1.png"]},
        events=events,
    )


BUILTIN = {
    "a": (scenario_a, topology),
    "b": (scenario_b, topology),
    "c": (scenario_c, topology_c),
    "d": (scenario_d, topology_d),
}


def builtin_path(name: str, kind: str) -> Path:
    """Path of a shipped ``scenario_<name>.json`` or ``topology_<name>.json``."""
    return Path(str(resources.files("nel_scope") / "data" / f"{kind}_{name}.json"))


def write_builtin(out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, (make_scenario, make_topology) in BUILTIN.items():
        (out / f"scenario_{name}.json").write_text(
            json.dumps(make_scenario().to_dict(), indent=2) + "\n", encoding="utf-8")
        (out / f"topology_{name}.json").write_text(
            json.dumps(make_topology().to_dict(), indent=2) + "\n", encoding="utf-8")
