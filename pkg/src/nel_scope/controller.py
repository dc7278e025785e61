"""Server-side policy generation: which report endpoint a client is told to upload to.

Three modes are supported:

``region-sampling``
    Hash the current minute and the client IP onto the region list. A host whose
    leftmost label is a region id (``<region>.westus2.neltest.com``) pins that region
    instead, and multiplexed hosts ``s<i>.<base>`` shift the hash by ``i`` so that
    ``N`` subdomains sample ``N`` different regions in the same minute.
``ldns-association``
    Advertise a hostname that encodes the client IP, so the authoritative DNS server
    can pair it with the resolver that asks for it.
``fixed``
    Always advertise the first configured region.
"""

from __future__ import annotations

import enum
import ipaddress
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any
from urllib.parse import urlsplit

from nel_scope.errors import ConfigError, DomainMismatchError, ParseError, ValidationError
from nel_scope.protocol import (
    NEL_HEADER,
    REPORT_TO_HEADER,
    NelPolicy,
    ReportEndpoint,
    ReportGroup,
    serialize_nel_header,
    serialize_report_to_header,
)

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

REPORT_PATH = "/report"

_MULTIPLEX_LABEL = re.compile(r"^s(\d+)$")
_HEX4 = re.compile(r"^[0-9a-f]{4}$")
_DEC = re.compile(r"^(0|[1-9][0-9]{0,2})$")


class Mode(str, enum.Enum):
    REGION_SAMPLING = "region-sampling"
    LDNS_ASSOCIATION = "ldns-association"
    FIXED = "fixed"


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def epoch_minute(now: float) -> int:
    return int(now // 60)


def canonical_ip(ip: str) -> str:
    try:
        return str(ipaddress.ip_address(ip.strip()))
    except ValueError as exc:
        raise ValidationError(f"invalid IP address {ip!r}") from exc


@dataclass(frozen=True)
class Region:
    region_id: str
    report_url: str


def select_endpoint(client_ip: str, now: float, regions: list[Region] | tuple[Region, ...],
                    offset: int = 0) -> Region:
    """Pick ``regions[(hash + offset) mod len]`` for this client and minute.

    The hash is FNV-1a 64 over ``"{epoch_minute}:{canonical ip}"``.
    """
    if not regions:
        raise ConfigError("no regions to select from")
    key = f"{epoch_minute(now)}:{canonical_ip(client_ip)}".encode("utf-8")
    return regions[(fnv1a_64(key) + offset) % len(regions)]


def _normalize_domain(name: str) -> str:
    name = name.strip().rstrip(".").lower()
    if not name:
        raise ValidationError("empty domain name")
    return name


def encode_client_hostname(client_ip: str, base_domain: str) -> str:
    base = _normalize_domain(base_domain)
    try:
        addr = ipaddress.ip_address(client_ip.strip())
    except ValueError as exc:
        raise ValidationError(f"invalid IP address {client_ip!r}") from exc
    if addr.version == 4:
        label = str(addr).replace(".", "-")
    else:
        label = addr.exploded.replace(":", "-")
    return f"{label}.{base}"


def decode_client_label(label: str) -> str:
    """Inverse of the label part of :func:`encode_client_hostname`; canonical form only."""
    parts = label.lower().split("-")
    if len(parts) == 4 and all(_DEC.match(p) for p in parts):
        try:
            return str(ipaddress.IPv4Address(".".join(parts)))
        except ValueError as exc:
            raise ParseError(f"label {label!r} is not an encoded IPv4 address") from exc
    if len(parts) == 8 and all(_HEX4.match(p) for p in parts):
        return str(ipaddress.IPv6Address(":".join(parts)))
    raise ParseError(f"label {label!r} is not an encoded IP address")


def decode_client_hostname(hostname: str, base_domain: str) -> str:
    base = _normalize_domain(base_domain)
    name = _normalize_domain(hostname)
    suffix = "." + base
    if not name.endswith(suffix):
        raise DomainMismatchError(f"{hostname!r} is not under {base_domain!r}")
    label = name[: -len(suffix)]
    if "." in label or not label:
        raise ParseError(f"{hostname!r} does not carry a single encoded label")
    return decode_client_label(label)


@dataclass(frozen=True)
class ZoneConfig:
    """Authoritative zone served by the DNS associator.

    ``records`` maps names (``*.`` wildcards allowed) to address lists; IPv4 and
    IPv6 addresses are split into A and AAAA answers.
    """

    collector_address: str = "127.0.0.1"
    collector_address_v6: str | None = None
    encoded_ttl: int = 0
    static_ttl: int = 300
    records: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> ZoneConfig:
        records = {_normalize_domain(k): tuple(canonical_ip(a) for a in (v if isinstance(v, list) else [v]))
                   for k, v in obj.get("records", {}).items()}
        v6 = obj.get("collector_address_v6")
        return cls(
            collector_address=canonical_ip(obj.get("collector_address", "127.0.0.1")),
            collector_address_v6=canonical_ip(v6) if v6 else None,
            encoded_ttl=int(obj.get("encoded_ttl", 0)),
            static_ttl=int(obj.get("static_ttl", 300)),
            records=records,
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "collector_address": self.collector_address,
            "encoded_ttl": self.encoded_ttl,
            "static_ttl": self.static_ttl,
            "records": {k: list(v) for k, v in self.records.items()},
        }
        if self.collector_address_v6:
            out["collector_address_v6"] = self.collector_address_v6
        return out


@dataclass(frozen=True)
class ControllerConfig:
    base_domain: str
    regions: tuple[Region, ...]
    mode: Mode = Mode.REGION_SAMPLING
    subdomain_count: int = 1
    success_fraction: float = 1.0
    failure_fraction: float = 1.0
    max_age: int = 300
    report_group: str = "default"
    # extra regions appended after the chosen one, as failover endpoints
    failover_endpoints: int = 0
    include_subdomains: bool = False
    report_scheme: str = "https"
    report_port: int | None = None
    zone: ZoneConfig = field(default_factory=ZoneConfig)

    def __post_init__(self) -> None:
        if not self.regions:
            raise ConfigError("at least one region is required")
        ids = [r.region_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate region ids in {ids}")
        if self.subdomain_count < 1:
            raise ConfigError("subdomain_count must be >= 1")
        if self.failover_endpoints < 0:
            raise ConfigError("failover_endpoints must be >= 0")
        if self.report_scheme not in ("http", "https"):
            raise ConfigError("report_scheme must be http or https")
        try:
            NelPolicy(self.report_group, self.max_age, self.success_fraction, self.failure_fraction)
            for r in self.regions:
                ReportEndpoint(r.report_url)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def insecure(self) -> bool:
        return self.report_scheme == "http" or any(not ReportEndpoint(r.report_url).secure for r in self.regions)

    def region(self, region_id: str) -> Region:
        for r in self.regions:
            if r.region_id == region_id:
                return r
        raise ConfigError(f"unknown region {region_id!r}")

    def rotated(self, steps: int = 1) -> ControllerConfig:
        k = steps % len(self.regions)
        return replace(self, regions=self.regions[k:] + self.regions[:k])

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> ControllerConfig:
        try:
            regions = tuple(Region(r["region_id"], r["report_url"]) for r in obj["regions"])
            return cls(
                base_domain=_normalize_domain(obj["base_domain"]),
                regions=regions,
                mode=Mode(obj.get("mode", Mode.REGION_SAMPLING.value)),
                subdomain_count=int(obj.get("subdomain_count", 1)),
                success_fraction=obj.get("success_fraction", 1.0),
                failure_fraction=obj.get("failure_fraction", 1.0),
                max_age=obj.get("max_age", 300),
                report_group=obj.get("report_group", "default"),
                failover_endpoints=int(obj.get("failover_endpoints", 0)),
                include_subdomains=bool(obj.get("include_subdomains", False)),
                report_scheme=obj.get("report_scheme", "https"),
                report_port=obj.get("report_port"),
                zone=ZoneConfig.from_dict(obj.get("zone", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid controller config: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "base_domain": self.base_domain,
            "mode": self.mode.value,
            "regions": [{"region_id": r.region_id, "report_url": r.report_url} for r in self.regions],
            "subdomain_count": self.subdomain_count,
            "success_fraction": self.success_fraction,
            "failure_fraction": self.failure_fraction,
            "max_age": self.max_age,
            "report_group": self.report_group,
            "failover_endpoints": self.failover_endpoints,
            "include_subdomains": self.include_subdomains,
            "report_scheme": self.report_scheme,
            "report_port": self.report_port,
            "zone": self.zone.to_dict(),
        }


def load_config(path: str | Path) -> ControllerConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    return ControllerConfig.from_dict(obj)


@dataclass(frozen=True)
class RequestContext:
    client_ip: str
    host: str
    now: float
    resource_path: str = "/"

    def __post_init__(self) -> None:
        object.__setattr__(self, "client_ip", canonical_ip(self.client_ip))


@dataclass(frozen=True)
class PolicyResponse:
    nel_header: str
    report_to_header: str
    region_id: str | None

    def headers(self) -> dict[str, str]:
        return {NEL_HEADER: self.nel_header, REPORT_TO_HEADER: self.report_to_header}


def _host_only(host: str) -> str:
    host = host.strip().lower()
    if host.startswith("["):
        return host[1:host.index("]")] if "]" in host else host
    return host.rsplit(":", 1)[0] if host.count(":") == 1 else host


def _multiplex_index(host: str, cfg: ControllerConfig) -> int:
    label = host.split(".", 1)[0]
    m = _MULTIPLEX_LABEL.match(label)
    if m and int(m.group(1)) < cfg.subdomain_count:
        return int(m.group(1))
    return 0


def _encoded_report_url(cfg: ControllerConfig, client_ip: str) -> str:
    host = encode_client_hostname(client_ip, cfg.base_domain)
    port = f":{cfg.report_port}" if cfg.report_port else ""
    return f"{cfg.report_scheme}://{host}{port}{REPORT_PATH}"


def choose_region(ctx: RequestContext, cfg: ControllerConfig) -> Region:
    host = _host_only(ctx.host)
    if cfg.mode is Mode.REGION_SAMPLING:
        pinned = host.split(".", 1)[0]
        for r in cfg.regions:
            if r.region_id == pinned:
                return r
        return select_endpoint(ctx.client_ip, ctx.now, cfg.regions, _multiplex_index(host, cfg))
    return cfg.regions[0]


def build_policy_response(ctx: RequestContext, cfg: ControllerConfig) -> PolicyResponse:
    if cfg.mode is Mode.LDNS_ASSOCIATION:
        urls = [_encoded_report_url(cfg, ctx.client_ip)]
        region_id = None
    else:
        first = choose_region(ctx, cfg)
        idx = cfg.regions.index(first)
        n = len(cfg.regions)
        extra = min(cfg.failover_endpoints, n - 1)
        chosen = [cfg.regions[(idx + k) % n] for k in range(extra + 1)]
        urls = [r.report_url for r in chosen]
        region_id = first.region_id
    policy = NelPolicy(
        report_to=cfg.report_group,
        max_age=cfg.max_age,
        success_fraction=cfg.success_fraction,
        failure_fraction=cfg.failure_fraction,
        include_subdomains=cfg.include_subdomains,
    )
    group = ReportGroup(
        group=cfg.report_group,
        max_age=cfg.max_age,
        endpoints=tuple(ReportEndpoint(u) for u in urls),
    )
    return PolicyResponse(serialize_nel_header(policy), serialize_report_to_header(group), region_id)


def report_url_host(url: str) -> str:
    return (urlsplit(url).hostname or "").lower()
