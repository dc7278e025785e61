"""Report collector: serves resources with NEL policies and logs report uploads.

One :class:`Collector` exists per region. Several collectors may share a
:class:`RecordStore`; each record carries the ``region_id`` of the collector that
wrote it.
"""

from __future__ import annotations

import base64
import itertools
import json
import logging
import threading
from importlib.resources import files
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from nel_scope.controller import REPORT_PATH, ControllerConfig, RequestContext, build_policy_response, canonical_ip
from nel_scope.errors import NelScopeError, ParseError
from nel_scope.protocol import NelReport, decode_report_batch

log = logging.getLogger(__name__)

# 1x1 transparent PNG
PIXEL_PNG = base64.b64decode(
    "iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAYAAAAfFcSJAAAADUlEQVR42mNkYPhfDwAChwGA60e6kgAAAABJRU5ErkJggg=="
)

DEFAULT_RESOURCES: dict[str, tuple[str, bytes]] = {
    "/corg1.png": ("image/png", PIXEL_PNG),
    "/pixel.png": ("image/png", PIXEL_PNG),
    "/testpage.html": (
        "text/html; charset=utf-8",
        (files("nel_scope") / "data" / "testpage.html").read_bytes(),
    ),
}


@dataclass(frozen=True)
class MeasurementRecord:
    ts: float
    client_ip: str
    region_id: str
    request_path: str
    upload: bool
    transport_rtt_ms: float = 0.0
    report: NelReport | None = None
    batch_id: str | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if self.transport_rtt_ms < 0:
            raise ValueError("transport_rtt_ms must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "ts": self.ts,
            "client_ip": self.client_ip,
            "region_id": self.region_id,
            "report": None if self.report is None else self.report.to_wire(),
            "transport_rtt_ms": self.transport_rtt_ms,
            "request_path": self.request_path,
            "upload": self.upload,
            "batch_id": self.batch_id,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> MeasurementRecord:
        report = obj.get("report")
        return cls(
            ts=obj["ts"],
            client_ip=obj["client_ip"],
            region_id=obj["region_id"],
            request_path=obj["request_path"],
            upload=obj["upload"],
            transport_rtt_ms=obj.get("transport_rtt_ms", 0.0),
            report=None if report is None else NelReport.from_wire(report),
            batch_id=obj.get("batch_id"),
            error=obj.get("error"),
        )


class RecordStore:
    """Append-only record log with an in-memory index and optional JSON-lines file.

    Appends are serialized by a lock; queries copy a consistent prefix.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self._records: list[MeasurementRecord] = []
        self._lock = threading.Lock()
        self._fh = None
        if path is not None:
            self.path = Path(path)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("a", encoding="utf-8")

    def append(self, records: Iterable[MeasurementRecord]) -> None:
        records = list(records)
        with self._lock:
            self._records.extend(records)
            if self._fh is not None and records:
                self._fh.write("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records))
                self._fh.flush()

    def query(
        self,
        region_id: str | None = None,
        client_ip: str | None = None,
        time_range: tuple[float, float] | None = None,
        upload_only: bool = False,
    ) -> list[MeasurementRecord]:
        with self._lock:
            snapshot = list(self._records)
        if client_ip is not None:
            client_ip = canonical_ip(client_ip)
        out = [
            r for r in snapshot
            if (region_id is None or r.region_id == region_id)
            and (client_ip is None or r.client_ip == client_ip)
            and (time_range is None or time_range[0] <= r.ts < time_range[1])
            and (not upload_only or r.upload)
        ]
        out.sort(key=lambda r: r.ts)
        return out

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


def read_records(path: str | Path) -> list[MeasurementRecord]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(MeasurementRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: bad record: {exc}") from exc
    return out


@dataclass
class HttpResponse:
    status: int
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""


def _header(headers: Mapping[str, str], name: str) -> str | None:
    name = name.lower()
    for k, v in headers.items():
        if k.lower() == name:
            return v
    return None


class Collector:
    """One regional collector instance.

    ``config`` is a plain attribute; the simulator swaps it to rotate endpoints.
    """

    def __init__(
        self,
        region_id: str,
        config: ControllerConfig,
        store: RecordStore,
        resources: Mapping[str, tuple[str, bytes]] | None = None,
    ) -> None:
        self.region_id = region_id
        self.config = config
        self.store = store
        self.resources = dict(DEFAULT_RESOURCES if resources is None else resources)
        self._batch_seq = itertools.count(1)
        self._seq_lock = threading.Lock()
        self.on_policy: Callable[[RequestContext, str | None], None] | None = None

    def _next_batch_id(self) -> str:
        with self._seq_lock:
            return f"{self.region_id}-{next(self._batch_seq)}"

    def handle_request(
        self,
        method: str,
        path: str,
        headers: Mapping[str, str],
        body: bytes,
        peer_ip: str,
        now: float,
        transport_rtt_ms: float = 0.0,
    ) -> HttpResponse:
        path = path.split("?", 1)[0] or "/"
        method = method.upper()
        peer_ip = canonical_ip(peer_ip)
        if path == REPORT_PATH:
            if method != "POST":
                return HttpResponse(405, {"Allow": "POST"})
            return self._handle_upload(body, peer_ip, now, transport_rtt_ms)
        if method not in ("GET", "HEAD") or path not in self.resources:
            return HttpResponse(404, {"Content-Type": "text/plain"}, b"not found")

        host = _header(headers, "Host") or self.config.base_domain
        ctx = RequestContext(client_ip=peer_ip, host=host, now=now, resource_path=path)
        policy = build_policy_response(ctx, self.config)
        if self.on_policy is not None:
            self.on_policy(ctx, policy.region_id)
        content_type, payload = self.resources[path]
        self.store.append([MeasurementRecord(
            ts=now, client_ip=peer_ip, region_id=self.region_id, request_path=path,
            upload=False, transport_rtt_ms=transport_rtt_ms,
        )])
        resp_headers = {"Content-Type": content_type, "Cache-Control": "no-store", **policy.headers()}
        return HttpResponse(200, resp_headers, b"" if method == "HEAD" else payload)

    def _handle_upload(self, body: bytes, peer_ip: str, now: float, rtt: float) -> HttpResponse:
        try:
            reports = decode_report_batch(body, now)
        except NelScopeError as exc:
            log.info("rejected upload from %s: %s", peer_ip, exc)
            self.store.append([MeasurementRecord(
                ts=now, client_ip=peer_ip, region_id=self.region_id, request_path=REPORT_PATH,
                upload=False, transport_rtt_ms=rtt, error=f"decode: {exc}",
            )])
            return HttpResponse(400, {"Content-Type": "text/plain"}, b"bad report batch")
        batch_id = self._next_batch_id()
        self.store.append(
            MeasurementRecord(
                ts=now, client_ip=peer_ip, region_id=self.region_id, request_path=REPORT_PATH,
                upload=True, transport_rtt_ms=rtt, report=r, batch_id=batch_id,
            )
            for r in reports
        )
        return HttpResponse(200, {"Content-Type": "text/plain"}, b"")

    def query_records(self, **filters: Any) -> list[MeasurementRecord]:
        return self.store.query(**filters)

