"""Authoritative DNS for the test domain, logging client/LDNS associations.

A query for ``<encoded-client-ip>.<base>`` arrives from the client's recursive
resolver, so the question name gives the client address and the UDP source
address gives the resolver. Both are recorded before answering.

Only a small RFC 1035 subset is served: QUERY opcode, one question, A/AAAA/ANY.
EDNS OPT records in queries are accepted and ignored.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, TextIO

import dns.exception
import dns.flags
import dns.message
import dns.opcode
import dns.rcode
import dns.rdataclass
import dns.rdatatype
import dns.rrset

from nel_scope.controller import ZoneConfig, canonical_ip, decode_client_label
from nel_scope.errors import ParseError

log = logging.getLogger(__name__)

NOERROR = "NOERROR"
NXDOMAIN = "NXDOMAIN"
REFUSED = "REFUSED"
FORMERR = "FORMERR"
NOTIMP = "NOTIMP"

_SUPPORTED_QTYPES = ("A", "AAAA", "ANY")


@dataclass(frozen=True)
class ClientLdnsAssociation:
    client_ip: str
    ldns_ip: str
    ts: float
    qname: str

    @property
    def self_resolved(self) -> bool:
        """Client and resolver share an address (VPN exit or on-host resolver)."""
        return self.client_ip == self.ldns_ip

    def to_dict(self) -> dict:
        return {**asdict(self), "self_resolved": self.self_resolved}


@dataclass(frozen=True)
class QueryLogEntry:
    ts: float
    qname: str
    qtype: str
    source_ip: str
    rcode: str
    association: bool


@dataclass(frozen=True)
class Answer:
    name: str
    qtype: str
    ttl: int
    address: str


@dataclass(frozen=True)
class DnsResponse:
    rcode: str
    answers: tuple[Answer, ...] = ()
    authoritative: bool = True


class AssociationStore:
    """Raw query log plus client -> resolver associations, optionally mirrored to JSON lines."""

    def __init__(self, path: str | Path | None = None, query_log_path: str | Path | None = None) -> None:
        self._lock = threading.Lock()
        self._queries: list[QueryLogEntry] = []
        self._associations: list[ClientLdnsAssociation] = []
        self._latest: dict[str, dict[str, float]] = {}
        self._assoc_fh = _open_append(path)
        self._query_fh = _open_append(query_log_path)

    def record(self, entry: QueryLogEntry, association: ClientLdnsAssociation | None) -> None:
        with self._lock:
            self._queries.append(entry)
            _write_line(self._query_fh, asdict(entry))
            if association is not None:
                self._associations.append(association)
                seen = self._latest.setdefault(association.client_ip, {})
                seen[association.ldns_ip] = max(seen.get(association.ldns_ip, association.ts), association.ts)
                _write_line(self._assoc_fh, association.to_dict())

    def queries(self) -> list[QueryLogEntry]:
        with self._lock:
            return list(self._queries)

    def associations(self) -> list[ClientLdnsAssociation]:
        with self._lock:
            return list(self._associations)

    def get_associations(self, client_ip: str) -> list[tuple[str, float]]:
        """Distinct resolvers seen for ``client_ip``, most recent first."""
        client_ip = canonical_ip(client_ip)
        with self._lock:
            seen = dict(self._latest.get(client_ip, {}))
        return sorted(seen.items(), key=lambda kv: (-kv[1], kv[0]))

    def close(self) -> None:
        with self._lock:
            for fh in (self._assoc_fh, self._query_fh):
                if fh is not None:
                    fh.close()
            self._assoc_fh = self._query_fh = None


def _open_append(path: str | Path | None) -> TextIO | None:
    if path is None:
        return None
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p.open("a", encoding="utf-8")


def _write_line(fh: TextIO | None, obj: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(obj, sort_keys=True) + "\n")
        fh.flush()


def read_associations(path: str | Path) -> list[ClientLdnsAssociation]:
    """Load associations from a JSON-lines log or from the CSV written by ``simulate``."""
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        first = fh.readline()
        fh.seek(0)
        if first.startswith("client_ip,"):
            rows = enumerate(csv.DictReader(fh), 2)
            kind = "csv"
        else:
            rows = ((n, line) for n, line in enumerate(fh, 1) if line.strip())
            kind = "json"
        out = []
        for lineno, row in rows:
            try:
                obj = row if kind == "csv" else json.loads(row)
                out.append(ClientLdnsAssociation(obj["client_ip"], obj["ldns_ip"], float(obj["ts"]), obj["qname"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: bad association: {exc}") from exc
    return out


def associations_csv(associations: Iterable[ClientLdnsAssociation], out: TextIO | None = None) -> str:
    buf = out if out is not None else io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["client_ip", "ldns_ip", "ts", "qname"])
    for a in associations:
        writer.writerow([a.client_ip, a.ldns_ip, a.ts, a.qname])
    return buf.getvalue() if out is None else ""


def _split_by_family(addresses: Iterable[str]) -> tuple[list[str], list[str]]:
    v4 = [a for a in addresses if ":" not in a]
    v6 = [a for a in addresses if ":" in a]
    return v4, v6


class DnsAssociator:
    def __init__(self, base_domain: str, zone: ZoneConfig, store: AssociationStore | None = None) -> None:
        self.base_domain = base_domain.rstrip(".").lower()
        self.zone = zone
        self.store = store if store is not None else AssociationStore()

    def _in_zone(self, name: str) -> bool:
        return name == self.base_domain or name.endswith("." + self.base_domain)

    def _encoded_client(self, name: str) -> str | None:
        if not name.endswith("." + self.base_domain):
            return None
        label = name[: -len(self.base_domain) - 1]
        if "." in label:
            return None
        try:
            return decode_client_label(label)
        except ValueError:
            return None

    def _static_lookup(self, name: str) -> tuple[str, ...] | None:
        records = self.zone.records
        if name in records:
            return records[name]
        # closest enclosing wildcard wins
        parts = name.split(".")
        for i in range(1, len(parts)):
            wildcard = "*." + ".".join(parts[i:])
            if wildcard in records:
                return records[wildcard]
        return None

    def handle_query(self, qname: str, qtype: str, source_ip: str, now: float) -> DnsResponse:
        name = qname.rstrip(".").lower()
        qtype = qtype.upper()
        source_ip = canonical_ip(source_ip)
        association = None
        if not self._in_zone(name):
            response = DnsResponse(REFUSED, authoritative=False)
        elif qtype not in _SUPPORTED_QTYPES:
            response = DnsResponse(NOTIMP)
        else:
            client = self._encoded_client(name)
            if client is not None:
                v4 = [self.zone.collector_address]
                v6 = [self.zone.collector_address_v6] if self.zone.collector_address_v6 else []
                ttl = self.zone.encoded_ttl
                association = ClientLdnsAssociation(client, source_ip, now, name)
                response = DnsResponse(NOERROR, self._answers(name, qtype, ttl, v4, v6))
            else:
                addresses = self._static_lookup(name)
                if addresses is None:
                    response = DnsResponse(NXDOMAIN)
                else:
                    v4, v6 = _split_by_family(addresses)
                    response = DnsResponse(NOERROR, self._answers(name, qtype, self.zone.static_ttl, v4, v6))
        self.store.record(
            QueryLogEntry(now, name, qtype, source_ip, response.rcode, association is not None),
            association,
        )
        return response

    @staticmethod
    def _answers(name: str, qtype: str, ttl: int, v4: list[str], v6: list[str]) -> tuple[Answer, ...]:
        out = []
        if qtype in ("A", "ANY"):
            out += [Answer(name, "A", ttl, a) for a in v4]
        if qtype in ("AAAA", "ANY"):
            out += [Answer(name, "AAAA", ttl, a) for a in v6]
        return tuple(out)

    def handle_datagram(self, data: bytes, source_ip: str, now: float) -> bytes | None:
        """Answer one wire-format query. Returns ``None`` when nothing sensible can be sent."""
        try:
            query = dns.message.from_wire(data)
        except dns.exception.DNSException:
            return _formerr(data)
        if query.flags & dns.flags.QR:
            return None
        if query.opcode() != dns.opcode.QUERY:
            resp = dns.message.make_response(query)
            resp.set_rcode(dns.rcode.NOTIMP)
            return resp.to_wire()
        if len(query.question) != 1:
            return _formerr(data)
        question = query.question[0]
        resp = dns.message.make_response(query)
        resp.flags &= ~dns.flags.RA
        if question.rdclass != dns.rdataclass.IN:
            resp.set_rcode(dns.rcode.REFUSED)
            return resp.to_wire()
        result = self.handle_query(
            question.name.to_text(omit_final_dot=True), dns.rdatatype.to_text(question.rdtype), source_ip, now
        )
        resp.set_rcode(dns.rcode.from_text(result.rcode))
        if result.authoritative:
            resp.flags |= dns.flags.AA
        for ans in result.answers:
            rrset = dns.rrset.from_text(ans.name + ".", ans.ttl, "IN", ans.qtype, ans.address)
            resp.answer.append(rrset)
        return resp.to_wire(max_size=512)


def _formerr(data: bytes) -> bytes | None:
    if len(data) < 2:
        return None
    header = data[:2] + bytes([0x80, dns.rcode.FORMERR]) + b"\x00" * 8
    return header


def make_query(qname: str, qtype: str = "A", query_id: int | None = None) -> bytes:
    msg = dns.message.make_query(qname, qtype, use_edns=False)
    if query_id is not None:
        msg.id = query_id
    return msg.to_wire()


def parse_response(data: bytes) -> tuple[str, list[str]]:
    """Return ``(rcode, addresses)`` from a wire-format response."""
    try:
        msg = dns.message.from_wire(data)
    except dns.exception.DNSException as exc:
        raise ValueError(f"malformed DNS response: {exc}") from exc
    addresses = [rd.address for rrset in msg.answer for rd in rrset
                 if rrset.rdtype in (dns.rdatatype.A, dns.rdatatype.AAAA)]
    return dns.rcode.to_text(msg.rcode()), addresses
