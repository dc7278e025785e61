"""Socket bindings: the same Collector / DnsAssociator / BrowserEmulator over real HTTP and UDP."""

from __future__ import annotations

import http.client
import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import urlsplit

from nel_scope.collector import Collector
from nel_scope.dns_associator import DnsAssociator, make_query, parse_response
from nel_scope.emulator import FetchError, FetchResult
from nel_scope.protocol import REPORTS_CONTENT_TYPE

log = logging.getLogger(__name__)

# byte offset of tcpi_rtt (microseconds) in Linux struct tcp_info
_TCPI_RTT_OFFSET = 68


@dataclass(frozen=True)
class Clock:
    """Virtual time derived from the wall clock.

    ``scale > 1`` makes virtual time run faster; it exists so tests can exercise
    the 60 s upload timer in a few wall seconds and must not be used in production.
    Processes sharing ``wall_origin`` and ``virtual_origin`` agree on the time.
    """

    wall_origin: float = 0.0
    virtual_origin: float = 0.0
    scale: float = 1.0

    def now(self) -> float:
        return self.virtual_origin + (time.time() - self.wall_origin) * self.scale

    def sleep_until(self, virtual: float) -> None:
        delay = (virtual - self.now()) / self.scale
        if delay > 0:
            time.sleep(delay)


REAL_TIME = Clock()


def parse_addr(addr: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    host = host.strip("[]") or default_host
    return host, int(port)


def socket_rtt_ms(sock: socket.socket) -> float | None:
    try:
        info = sock.getsockopt(socket.IPPROTO_TCP, socket.TCP_INFO, 104)
    except (AttributeError, OSError):
        return None
    if len(info) < _TCPI_RTT_OFFSET + 4:
        return None
    (rtt_us,) = struct.unpack_from("I", info, _TCPI_RTT_OFFSET)
    return rtt_us / 1000.0


class _CollectorHandler(BaseHTTPRequestHandler):
    server: CollectorHTTPServer
    protocol_version = "HTTP/1.1"

    def _dispatch(self) -> None:
        started = time.monotonic()
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        rtt = socket_rtt_ms(self.connection)
        if rtt is None:
            rtt = (time.monotonic() - started) * 1000.0
        resp = self.server.collector.handle_request(
            self.command, self.path, dict(self.headers.items()), body,
            self.client_address[0], self.server.clock.now(), rtt,
        )
        self.send_response(resp.status)
        for k, v in resp.headers.items():
            self.send_header(k, v)
        self.send_header("Content-Length", str(len(resp.body)))
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(resp.body)

    do_GET = do_POST = do_HEAD = _dispatch

    def log_message(self, fmt: str, *args) -> None:
        log.debug("%s %s", self.client_address[0], fmt % args)


class CollectorHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, addr: tuple[str, int], collector: Collector, clock: Clock = REAL_TIME) -> None:
        super().__init__(addr, _CollectorHandler)
        self.collector = collector
        self.clock = clock


class _DnsHandler(socketserver.BaseRequestHandler):
    server: DnsUDPServer

    def handle(self) -> None:
        data, sock = self.request
        reply = self.server.associator.handle_datagram(data, self.client_address[0], self.server.clock.now())
        if reply is not None:
            sock.sendto(reply, self.client_address)


class DnsUDPServer(socketserver.ThreadingUDPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr: tuple[str, int], associator: DnsAssociator, clock: Clock = REAL_TIME) -> None:
        super().__init__(addr, _DnsHandler)
        self.associator = associator
        self.clock = clock


def start_in_thread(server: socketserver.BaseServer) -> threading.Thread:
    t = threading.Thread(target=server.serve_forever, name=type(server).__name__, daemon=True)
    t.start()
    return t


class UdpResolver:
    """Stub resolver that asks one DNS server directly (A records only)."""

    def __init__(self, server: tuple[str, int], timeout: float = 2.0) -> None:
        self.server = server
        self.timeout = timeout
        self._id = 0

    def resolve(self, host: str, now: float) -> str | None:
        self._id = (self._id + 1) & 0xFFFF
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
            sock.settimeout(self.timeout)
            try:
                sock.sendto(make_query(host, "A", self._id), self.server)
                data, _ = sock.recvfrom(512)
                rcode, addresses = parse_response(data)
            except (OSError, ValueError):
                return None
        return addresses[0] if rcode == "NOERROR" and addresses else None


class HttpTransport:
    """Plain-HTTP transport; TLS is left to a fronting proxy in real deployments."""

    def __init__(self, resolver: UdpResolver, timeout: float = 5.0,
                 on_upload: Callable[[str, bool], None] | None = None) -> None:
        self.resolver = resolver
        self.timeout = timeout
        self.on_upload = on_upload

    def _request(self, method: str, url: str, address: str, body: bytes = b"",
                 headers: dict[str, str] | None = None) -> tuple[int, dict[str, str], float]:
        parts = urlsplit(url)
        port = parts.port or (443 if parts.scheme == "https" else 80)
        started = time.monotonic()
        conn = http.client.HTTPConnection(address, port, timeout=self.timeout)
        try:
            conn.request(method, parts.path or "/", body=body or None,
                         headers={"Host": parts.netloc, **(headers or {})})
            resp = conn.getresponse()
            resp.read()
            return resp.status, dict(resp.getheaders()), (time.monotonic() - started) * 1000.0
        finally:
            conn.close()

    def fetch(self, url: str, address: str, now: float) -> FetchResult:
        try:
            status, headers, elapsed = self._request("GET", url, address)
        except socket.timeout as exc:
            raise FetchError("tcp.timed_out", "connection", server_ip=address) from exc
        except ConnectionRefusedError as exc:
            raise FetchError("tcp.refused", "connection", server_ip=address) from exc
        except OSError as exc:
            raise FetchError("tcp.failed", "connection", server_ip=address) from exc
        return FetchResult(status, headers, elapsed, server_ip=address)

    def upload(self, url: str, payload: bytes, now: float) -> bool:
        address = self.resolver.resolve(urlsplit(url).hostname or "", now)
        ok = False
        if address is not None:
            try:
                status, _, _ = self._request("POST", url, address, payload,
                                             {"Content-Type": REPORTS_CONTENT_TYPE})
                ok = status == 200
            except OSError:
                ok = False
        if self.on_upload is not None:
            self.on_upload(url, ok)
        return ok
