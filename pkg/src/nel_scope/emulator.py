"""A NEL user agent: policy cache, sampling, per-domain report queues, timed uploads.

The emulator never reads a clock or an RNG on its own initiative except through
``load_page``; every method takes ``now`` and sampling draws can be injected, so a
harness fully controls timing and randomness.

Behaviours worth knowing:

* one policy per domain; a new policy always replaces the old one, expired or not
* ``max_age == 0`` removes the policy and discards that domain's queue
* at upload time the batch goes to the group of the *current* policy, not the one
  in force when the report was queued
* uploads for a domain happen at most once per ``upload_interval`` (60 s)
* reports left in a queue whose policy has since expired are dropped at upload time
"""

from __future__ import annotations

import logging
import random
from collections import Counter, deque
from dataclasses import dataclass
from typing import Iterable, Protocol
from urllib.parse import urlsplit

from nel_scope.errors import NelScopeError
from nel_scope.protocol import (
    NEL_HEADER,
    REPORT_TO_HEADER,
    NelPolicy,
    NelReport,
    NelReportBody,
    ReportGroup,
    encode_report_batch,
    parse_nel_header,
    parse_report_to_header,
)

log = logging.getLogger(__name__)

UPLOAD_INTERVAL = 60.0
QUEUE_CAP = 100


@dataclass(frozen=True)
class FetchResult:
    status: int
    headers: dict[str, str]
    elapsed_ms: float
    server_ip: str = ""
    protocol: str = "http/1.1"


class FetchError(Exception):
    """A request failed below HTTP; carries the NEL error type and phase."""

    def __init__(self, nel_type: str, phase: str, elapsed_ms: float = 0.0, server_ip: str = "") -> None:
        super().__init__(nel_type)
        self.nel_type = nel_type
        self.phase = phase
        self.elapsed_ms = elapsed_ms
        self.server_ip = server_ip


class Resolver(Protocol):
    def resolve(self, host: str, now: float) -> str | None: ...


class Transport(Protocol):
    def fetch(self, url: str, address: str, now: float) -> FetchResult: ...

    def upload(self, url: str, payload: bytes, now: float) -> bool: ...


@dataclass(frozen=True)
class Outcome:
    """What happened to one request, as the user agent saw it."""

    url: str
    success: bool
    status_code: int = 0
    elapsed_ms: float = 0.0
    phase: str = "application"
    type: str = "ok"
    server_ip: str = ""
    protocol: str = "http/1.1"
    method: str = "GET"

    @classmethod
    def ok(cls, url: str, status_code: int = 200, elapsed_ms: float = 0.0, **kw) -> Outcome:
        return cls(url=url, success=True, status_code=status_code, elapsed_ms=elapsed_ms, **kw)

    @classmethod
    def failed(cls, url: str, nel_type: str, phase: str, elapsed_ms: float = 0.0, **kw) -> Outcome:
        return cls(url=url, success=False, type=nel_type, phase=phase, elapsed_ms=elapsed_ms, **kw)


@dataclass(frozen=True)
class PolicyEntry:
    policy: NelPolicy
    group: ReportGroup
    installed_at: float

    def expired(self, now: float) -> bool:
        return self.installed_at + self.policy.max_age < now


@dataclass(frozen=True)
class UploadResult:
    domain: str
    endpoint_used: str | None
    batch_size: int
    delivered: bool
    ts: float = 0.0
    attempts: tuple[str, ...] = ()


@dataclass
class DomainLedger:
    queued: int = 0
    delivered: int = 0
    dropped_overflow: int = 0
    dropped_no_policy: int = 0
    dropped_removed: int = 0


def _host(url: str) -> str:
    return (urlsplit(url).hostname or "").lower()


class BrowserEmulator:
    def __init__(
        self,
        *,
        upload_interval: float = UPLOAD_INTERVAL,
        queue_cap: int = QUEUE_CAP,
        allow_insecure: bool = False,
        rng: random.Random | None = None,
    ) -> None:
        self.upload_interval = upload_interval
        self.queue_cap = queue_cap
        self.allow_insecure = allow_insecure
        self.rng = rng if rng is not None else random.Random()
        self.store: dict[str, PolicyEntry] = {}
        self.queues: dict[str, deque[NelReport]] = {}
        self.next_upload_at: dict[str, float] = {}
        self.ledger: dict[str, DomainLedger] = {}
        self.uploads: list[UploadResult] = []

    def _ledger(self, domain: str) -> DomainLedger:
        return self.ledger.setdefault(domain, DomainLedger())

    # -- policy cache ------------------------------------------------------------

    def install_from_response(
        self, domain: str, nel_header: str | None, report_to_header: str | None, now: float
    ) -> None:
        domain = domain.lower().rstrip(".")
        if not nel_header:
            return
        try:
            policy = parse_nel_header(nel_header)
        except NelScopeError as exc:
            log.debug("ignoring NEL header for %s: %s", domain, exc)
            return
        if policy.removes:
            self.store.pop(domain, None)
            dropped = self.queues.pop(domain, None)
            if dropped:
                self._ledger(domain).dropped_removed += len(dropped)
            return
        if not report_to_header:
            return
        try:
            group = parse_report_to_header(report_to_header, allow_insecure=self.allow_insecure)
        except NelScopeError as exc:
            log.debug("ignoring Report-To header for %s: %s", domain, exc)
            return
        if group.group != policy.report_to:
            log.debug("policy for %s names group %r but Report-To defines %r", domain, policy.report_to, group.group)
            return
        self.store[domain] = PolicyEntry(policy, group, now)

    def policy_domain(self, domain: str, now: float) -> str | None:
        """Domain whose policy governs requests to ``domain`` at ``now``, if any."""
        domain = domain.lower().rstrip(".")
        entry = self.store.get(domain)
        if entry is not None and not entry.expired(now):
            return domain
        labels = domain.split(".")
        for i in range(1, len(labels)):
            parent = ".".join(labels[i:])
            entry = self.store.get(parent)
            if entry is not None and not entry.expired(now) and entry.policy.include_subdomains:
                return parent
        return None

    # -- sampling ----------------------------------------------------------------

    def observe_request(self, domain: str, outcome: Outcome, draw: float, now: float) -> bool:
        owner = self.policy_domain(domain, now)
        if owner is None:
            return False
        policy = self.store[owner].policy
        fraction = policy.success_fraction if outcome.success else policy.failure_fraction
        if not draw < fraction:
            return False
        body = NelReportBody(
            phase=outcome.phase,
            type=outcome.type,
            status_code=outcome.status_code,
            elapsed_time_ms=max(0, round(outcome.elapsed_ms)),
            sampling_fraction=fraction,
            server_ip=outcome.server_ip,
            protocol=outcome.protocol,
            method=outcome.method,
        )
        queue = self.queues.setdefault(owner, deque())
        if len(queue) >= self.queue_cap:
            queue.popleft()
            self._ledger(owner).dropped_overflow += 1
        queue.append(NelReport(url=outcome.url, body=body, observed_at=now))
        self._ledger(owner).queued += 1
        return True

    # -- uploads -----------------------------------------------------------------

    def tick(self, now: float, transport: Transport) -> list[UploadResult]:
        results = []
        for domain in sorted(self.queues):
            queue = self.queues[domain]
            if not queue or self.next_upload_at.get(domain, float("-inf")) > now:
                continue
            batch = list(queue)
            queue.clear()
            entry = self.store.get(domain)
            if entry is None or entry.expired(now):
                self._ledger(domain).dropped_no_policy += len(batch)
                result = UploadResult(domain, None, len(batch), False, now)
                results.append(result)
                continue
            payload = encode_report_batch(batch, now)
            used = None
            attempts = []
            for endpoint in entry.group.failover_order():
                attempts.append(endpoint.url)
                if transport.upload(endpoint.url, payload, now):
                    used = endpoint.url
                    break
            if used is None:
                # keep the batch ahead of anything queued later; honour the cap
                queue.extend(batch)
                while len(queue) > self.queue_cap:
                    queue.popleft()
                    self._ledger(domain).dropped_overflow += 1
            else:
                self._ledger(domain).delivered += len(batch)
            self.next_upload_at[domain] = now + self.upload_interval
            results.append(UploadResult(domain, used, len(batch), used is not None, now, tuple(attempts)))
        self.uploads.extend(results)
        return results

    def pending(self, domain: str | None = None) -> int:
        if domain is not None:
            return len(self.queues.get(domain, ()))
        return sum(len(q) for q in self.queues.values())

    def conservation(self) -> dict[str, bool]:
        """Per domain: queued == delivered + dropped + still queued."""
        out = {}
        for domain, led in self.ledger.items():
            dropped = led.dropped_overflow + led.dropped_no_policy + led.dropped_removed
            out[domain] = led.queued == led.delivered + dropped + self.pending(domain)
        return out

    # -- page loads --------------------------------------------------------------

    def load_page(
        self,
        page: Iterable[str],
        resolver: Resolver,
        transport: Transport,
        now: float,
        draws: Iterable[float] | None = None,
    ) -> list[Outcome]:
        """Fetch each resource URL, installing policies and queueing reports."""
        draw_iter = iter(draws) if draws is not None else None
        outcomes = []
        for url in page:
            host = _host(url)
            address = resolver.resolve(host, now)
            if address is None:
                outcome = Outcome.failed(url, "dns.unreachable", "dns")
            else:
                try:
                    result = transport.fetch(url, address, now)
                except FetchError as exc:
                    outcome = Outcome.failed(url, exc.nel_type, exc.phase, exc.elapsed_ms, server_ip=address)
                else:
                    headers = {k.lower(): v for k, v in result.headers.items()}
                    self.install_from_response(
                        host, headers.get(NEL_HEADER.lower()), headers.get(REPORT_TO_HEADER.lower()), now
                    )
                    if 200 <= result.status < 400:
                        outcome = Outcome.ok(url, result.status, result.elapsed_ms,
                                             server_ip=result.server_ip or address, protocol=result.protocol)
                    else:
                        outcome = Outcome.failed(url, "http.error", "application", result.elapsed_ms,
                                                 status_code=result.status, server_ip=address)
            draw = next(draw_iter) if draw_iter is not None else self.rng.random()
            self.observe_request(host, outcome, draw, now)
            outcomes.append(outcome)
        return outcomes

    def delivered_counts(self) -> Counter:
        return Counter(u.endpoint_used for u in self.uploads if u.delivered)
