"""Codecs for the ``NEL`` and ``Report-To`` response headers and report upload payloads.

Everything here is a pure function over frozen dataclasses, so it is safe to call
from any thread.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Any
from urllib.parse import urlsplit

from nel_scope.errors import ParseError, ValidationError

NEL_HEADER = "NEL"
REPORT_TO_HEADER = "Report-To"
REPORTS_CONTENT_TYPE = "application/reports+json"
REPORT_TYPE = "network-error"

PHASES = ("dns", "connection", "application")

# RFC 7230 tchar
_TOKEN_RE = re.compile(r"^[A-Za-z0-9!#$%&'*+.^_`|~-]+$")

_FRACTION_DIGITS = 4


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_fraction(name: str, value: Any) -> float:
    if not _is_number(value) or math.isnan(value):
        raise ValidationError(f"{name} must be a number, got {value!r}")
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must be within [0, 1], got {value!r}")
    return float(value)


def _check_non_negative_int(name: str, value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    if isinstance(value, float):
        if not value.is_integer():
            raise ValidationError(f"{name} must be an integer, got {value!r}")
        value = int(value)
    if value < 0:
        raise ValidationError(f"{name} must be non-negative, got {value!r}")
    return value


def _check_token(name: str, value: Any) -> str:
    if not isinstance(value, str) or not _TOKEN_RE.match(value):
        raise ValidationError(f"{name} must be a non-empty token, got {value!r}")
    return value


def _load_object(raw: str | bytes, what: str) -> dict[str, Any]:
    try:
        obj = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{what} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ParseError(f"{what} must be a JSON object")
    return obj


def _dump(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True)


@dataclass(frozen=True)
class NelPolicy:
    """A parsed ``NEL`` header.

    ``max_age == 0`` is a removal signal, not a policy that expires immediately.
    ``installed_at`` is filled in by the consumer and never serialized.
    """

    report_to: str
    max_age: int
    success_fraction: float = 0.0
    failure_fraction: float = 1.0
    include_subdomains: bool = False
    installed_at: float | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        _check_token("report_to", self.report_to)
        _check_non_negative_int("max_age", self.max_age)
        _check_fraction("success_fraction", self.success_fraction)
        _check_fraction("failure_fraction", self.failure_fraction)
        if not isinstance(self.include_subdomains, bool):
            raise ValidationError("include_subdomains must be a boolean")

    @property
    def removes(self) -> bool:
        return self.max_age == 0


def parse_nel_header(raw: str | bytes) -> NelPolicy:
    obj = _load_object(raw, "NEL header")
    for key in ("report_to", "max_age"):
        if key not in obj:
            raise ValidationError(f"NEL header is missing {key!r}")
    return NelPolicy(
        report_to=_check_token("report_to", obj["report_to"]),
        max_age=_check_non_negative_int("max_age", obj["max_age"]),
        success_fraction=_check_fraction("success_fraction", obj.get("success_fraction", 0.0)),
        failure_fraction=_check_fraction("failure_fraction", obj.get("failure_fraction", 1.0)),
        include_subdomains=_check_bool("include_subdomains", obj.get("include_subdomains", False)),
    )


def _check_bool(name: str, value: Any) -> bool:
    if not isinstance(value, bool):
        raise ValidationError(f"{name} must be a boolean, got {value!r}")
    return value


def serialize_nel_header(policy: NelPolicy) -> str:
    obj: dict[str, Any] = {
        "report_to": policy.report_to,
        "max_age": policy.max_age,
        "success_fraction": round(policy.success_fraction, _FRACTION_DIGITS),
        "failure_fraction": round(policy.failure_fraction, _FRACTION_DIGITS),
    }
    if policy.include_subdomains:
        obj["include_subdomains"] = True
    return _dump(obj)


@dataclass(frozen=True)
class ReportEndpoint:
    url: str
    priority: int = 0
    weight: int = 1

    def __post_init__(self) -> None:
        if not isinstance(self.url, str):
            raise ValidationError(f"endpoint url must be a string, got {self.url!r}")
        parts = urlsplit(self.url)
        if parts.scheme not in ("https", "http") or not parts.hostname:
            raise ValidationError(f"endpoint url must be an absolute http(s) URL, got {self.url!r}")
        _check_non_negative_int("priority", self.priority)
        if isinstance(self.weight, bool) or not isinstance(self.weight, int) or self.weight < 1:
            raise ValidationError(f"weight must be a positive integer, got {self.weight!r}")

    @property
    def secure(self) -> bool:
        return urlsplit(self.url).scheme == "https"


@dataclass(frozen=True)
class ReportGroup:
    """A named, ordered list of upload endpoints. Order is the failover order."""

    max_age: int
    endpoints: tuple[ReportEndpoint, ...]
    group: str = "default"

    def __post_init__(self) -> None:
        _check_token("group", self.group)
        _check_non_negative_int("max_age", self.max_age)
        if not self.endpoints:
            raise ValidationError("report group needs at least one endpoint")
        object.__setattr__(self, "endpoints", tuple(self.endpoints))

    def failover_order(self) -> list[ReportEndpoint]:
        # sorted() is stable, so header order breaks priority ties
        return sorted(self.endpoints, key=lambda e: e.priority)


def parse_report_to_header(raw: str | bytes, *, allow_insecure: bool = False) -> ReportGroup:
    obj = _load_object(raw, "Report-To header")
    if "max_age" not in obj:
        raise ValidationError("Report-To header is missing 'max_age'")
    endpoints_raw = obj.get("endpoints")
    if not isinstance(endpoints_raw, list):
        raise ValidationError("Report-To 'endpoints' must be a list")
    endpoints = []
    for item in endpoints_raw:
        if not isinstance(item, dict) or "url" not in item:
            raise ValidationError(f"malformed endpoint entry {item!r}")
        endpoint = ReportEndpoint(
            url=item["url"],
            priority=item.get("priority", 0),
            weight=item.get("weight", 1),
        )
        if not endpoint.secure and not allow_insecure:
            raise ValidationError(f"insecure endpoint {endpoint.url!r} requires allow_insecure")
        endpoints.append(endpoint)
    return ReportGroup(
        group=obj.get("group", "default"),
        max_age=_check_non_negative_int("max_age", obj["max_age"]),
        endpoints=tuple(endpoints),
    )


def serialize_report_to_header(group: ReportGroup) -> str:
    endpoints = []
    for e in group.endpoints:
        item: dict[str, Any] = {"url": e.url}
        if e.priority:
            item["priority"] = e.priority
        if e.weight != 1:
            item["weight"] = e.weight
        endpoints.append(item)
    return _dump({"group": group.group, "max_age": group.max_age, "endpoints": endpoints})


@dataclass(frozen=True)
class NelReportBody:
    phase: str
    type: str
    status_code: int = 0
    elapsed_time_ms: int = 0
    sampling_fraction: float = 1.0
    server_ip: str = ""
    protocol: str = "http/1.1"
    method: str = "GET"

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ValidationError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if not isinstance(self.type, str) or not self.type:
            raise ValidationError("report type must be a non-empty string")
        _check_fraction("sampling_fraction", self.sampling_fraction)
        _check_non_negative_int("elapsed_time_ms", self.elapsed_time_ms)
        _check_non_negative_int("status_code", self.status_code)
        if self.type == "ok" and (self.phase != "application" or not 100 <= self.status_code <= 599):
            raise ValidationError("an 'ok' report needs phase=application and an HTTP status code")

    def to_wire(self) -> dict[str, Any]:
        # W3C field name for the duration is "elapsed_time" (milliseconds)
        return {
            "sampling_fraction": self.sampling_fraction,
            "server_ip": self.server_ip,
            "protocol": self.protocol,
            "method": self.method,
            "status_code": self.status_code,
            "elapsed_time": self.elapsed_time_ms,
            "phase": self.phase,
            "type": self.type,
        }

    @classmethod
    def from_wire(cls, obj: Any) -> NelReportBody:
        if not isinstance(obj, dict):
            raise ParseError("report body must be an object")
        try:
            return cls(
                phase=obj["phase"],
                type=obj["type"],
                status_code=obj.get("status_code", 0),
                elapsed_time_ms=obj.get("elapsed_time", 0),
                sampling_fraction=obj.get("sampling_fraction", 1.0),
                server_ip=obj.get("server_ip", ""),
                protocol=obj.get("protocol", ""),
                method=obj.get("method", ""),
            )
        except KeyError as exc:
            raise ParseError(f"report body is missing {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class NelReport:
    """One queued observation.

    ``observed_at`` (seconds) lives only on the client side; encoding converts it to
    ``age_ms`` relative to the send time. It does not take part in equality.
    """

    url: str
    body: NelReportBody
    age_ms: int = 0
    report_type: str = REPORT_TYPE
    observed_at: float | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.report_type != REPORT_TYPE:
            raise ValidationError(f"unsupported report type {self.report_type!r}")
        _check_non_negative_int("age_ms", self.age_ms)

    def to_wire(self, now: float | None = None) -> dict[str, Any]:
        age = self.age_ms
        if now is not None and self.observed_at is not None:
            if self.observed_at > now:
                raise ValidationError("report observed after the send time")
            age = round((now - self.observed_at) * 1000)
        return {"age": age, "type": self.report_type, "url": self.url, "body": self.body.to_wire()}

    @classmethod
    def from_wire(cls, obj: Any, now: float | None = None) -> NelReport:
        if not isinstance(obj, dict):
            raise ParseError("report must be a JSON object")
        if "body" not in obj:
            raise ParseError("report is missing 'body'")
        for key in ("type", "url"):
            if key not in obj:
                raise ParseError(f"report is missing {key!r}")
        age = obj.get("age", 0)
        age_ms = _check_non_negative_int("age", age)
        return cls(
            url=obj["url"],
            body=NelReportBody.from_wire(obj["body"]),
            age_ms=age_ms,
            report_type=obj["type"],
            observed_at=None if now is None else now - age_ms / 1000.0,
        )


def encode_report_batch(reports: list[NelReport], now: float) -> bytes:
    return _dump([r.to_wire(now) for r in reports]).encode("utf-8")


def decode_report_batch(payload: bytes | str, now: float | None = None) -> list[NelReport]:
    try:
        items = json.loads(payload)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"report batch is not valid JSON: {exc}") from exc
    if not isinstance(items, list):
        raise ParseError("report batch must be a JSON array")
    return [NelReport.from_wire(item, now) for item in items]
