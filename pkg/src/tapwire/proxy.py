"""Capturing TCP man-in-the-middle relay.

The proxy accepts a client, opens one upstream connection for it and relays
bytes both ways unchanged.  Every relay read is recorded as a packet before
it is forwarded, and streamed straight into ``<capture_dir>/<session>.hyc``.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import select
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from .capture import Direction, Packet, SessionBuilder
from .netutil import ConnectFailed, connect, format_addr, parse_addr
from .sniff import CredentialHit, SniffRuleSet, sniff_packets

log = logging.getLogger(__name__)

CHUNK = 64 * 1024
POLL_S = 0.2


class ProxyError(Exception):
    pass


class BindFailed(ProxyError):
    pass


class UpstreamConnectFailed(ProxyError):
    pass


class CaptureWriteFailed(ProxyError):
    pass


@dataclass(frozen=True)
class ProxyConfig:
    listen_addr: str
    upstream_addr: str
    capture_path: str
    sniff_rules: SniffRuleSet = SniffRuleSet()
    max_sessions: int = 64
    idle_timeout_s: float = 300

    def __post_init__(self):
        if parse_addr(self.listen_addr) == parse_addr(self.upstream_addr):
            raise ValueError("listen and upstream addresses must differ")
        if self.max_sessions < 1 or self.idle_timeout_s <= 0:
            raise ValueError("max_sessions and idle_timeout_s must be positive")


@dataclass(frozen=True)
class SessionSummary:
    session_id: bytes
    c2s_bytes: int
    s2c_bytes: int
    hits: tuple[CredentialHit, ...] = ()
    capture_file: str = field(default="", compare=False)

    def to_json(self, show_secrets: bool = False) -> str:
        return json.dumps({
            "session_id": self.session_id.hex(),
            "c2s_bytes": self.c2s_bytes,
            "s2c_bytes": self.s2c_bytes,
            "hits": [h.as_dict(show_secrets) for h in self.hits],
        }, separators=(",", ":"))


class _Connection:
    def __init__(self, proxy: "CaptureProxy", client: socket.socket, client_addr):
        self.proxy = proxy
        self.client = client
        self.client_addr = format_addr(client_addr)
        self.upstream: Optional[socket.socket] = None
        self.abort = threading.Event()
        self.last_activity = time.monotonic()
        self.early_client: list[Packet] = []
        self.capture_error: Optional[BaseException] = None

    def run(self) -> Optional[SessionSummary]:
        config = self.proxy.config
        try:
            self.upstream = connect(config.upstream_addr)
        except ConnectFailed as exc:
            self.client.close()
            raise UpstreamConnectFailed(str(exc)) from exc

        builder = None
        path = None
        try:
            session_id = os.urandom(16)
            path = os.path.join(config.capture_path, session_id.hex() + ".hyc")
            try:
                sink = open(path, "wb")
                builder = SessionBuilder(session_id, sink=sink, keep=False,
                                         peer_client=self.client_addr, peer_server=config.upstream_addr)
            except OSError as exc:
                raise CaptureWriteFailed(f"{path}: {exc}") from exc
            with sink:
                threads = [
                    threading.Thread(target=self._pump, args=(self.client, self.upstream, Direction.CLIENT_TO_SERVER, builder)),
                    threading.Thread(target=self._pump, args=(self.upstream, self.client, Direction.SERVER_TO_CLIENT, builder)),
                ]
                for t in threads:
                    t.start()
                for t in threads:
                    t.join()
                if self.capture_error is None:
                    try:
                        builder.finish()
                    except OSError as exc:
                        self.capture_error = exc
            if self.capture_error is not None:
                raise CaptureWriteFailed(f"{path}: {self.capture_error}") from self.capture_error
        except CaptureWriteFailed:
            if path is not None and os.path.exists(path):
                os.unlink(path)
            raise
        finally:
            for s in (self.client, self.upstream):
                s.close()

        hits = sniff_packets(builder.session_id, self.early_client, config.sniff_rules)
        return SessionSummary(builder.session_id, builder.byte_counts[Direction.CLIENT_TO_SERVER],
                              builder.byte_counts[Direction.SERVER_TO_CLIENT], tuple(hits), path)

    def _stop_both(self):
        self.abort.set()
        for s in (self.client, self.upstream):
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def _pump(self, src: socket.socket, dst: socket.socket, direction: Direction, builder: SessionBuilder):
        limit = self.proxy.config.sniff_rules.max_client_packets
        idle = self.proxy.config.idle_timeout_s
        while not self.abort.is_set():
            if self.proxy.stopping.is_set():
                self._stop_both()
                return
            try:
                ready, _, _ = select.select([src], [], [], POLL_S)
            except (OSError, ValueError):
                self._stop_both()
                return
            if not ready:
                if time.monotonic() - self.last_activity > idle:
                    log.info("session idle for %ss, closing", idle)
                    self._stop_both()
                    return
                continue
            try:
                data = src.recv(CHUNK)
            except OSError:
                self._stop_both()
                return
            if not data:
                # half-close: propagate EOF, keep the other direction running
                try:
                    dst.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                return
            self.last_activity = time.monotonic()
            try:
                packet = builder.append(direction, data)
            except OSError as exc:
                self.capture_error = exc
                self._stop_both()
                return
            if direction == Direction.CLIENT_TO_SERVER and len(self.early_client) < limit:
                self.early_client.append(packet)
            try:
                dst.sendall(data)
            except OSError:
                self._stop_both()
                return


class CaptureProxy:
    """Threaded capture proxy.  Summaries go to ``on_summary`` one at a time."""

    def __init__(self, config: ProxyConfig, on_summary: Callable[[SessionSummary], None] = None):
        self.config = config
        self.on_summary = on_summary
        self.stopping = threading.Event()
        self._emit_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(config.max_sessions)
        self._workers: set[threading.Thread] = set()
        self._workers_lock = threading.Lock()
        self._serving = threading.Event()
        host, port = parse_addr(config.listen_addr)
        try:
            infos = socket.getaddrinfo(host, port, type=socket.SOCK_STREAM)
            family = infos[0][0]
            self._listener = socket.socket(family, socket.SOCK_STREAM)
            self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._listener.bind((host, port))
            self._listener.listen(64)
        except OSError as exc:
            raise BindFailed(f"cannot listen on {config.listen_addr}: {exc}") from exc
        if not os.path.isdir(config.capture_path):
            self._listener.close()
            raise CaptureWriteFailed(f"capture directory {config.capture_path} does not exist")

    @property
    def address(self) -> str:
        return format_addr(self._listener.getsockname())

    def serve_forever(self) -> None:
        self._serving.set()
        try:
            while not self.stopping.is_set():
                if not self._slots.acquire(timeout=POLL_S):
                    continue
                try:
                    ready, _, _ = select.select([self._listener], [], [], POLL_S)
                    if not ready:
                        self._slots.release()
                        continue
                    client, addr = self._listener.accept()
                except OSError:
                    self._slots.release()
                    if self.stopping.is_set():
                        break
                    raise
                worker = threading.Thread(target=self._handle, args=(client, addr), daemon=True)
                with self._workers_lock:
                    self._workers.add(worker)
                worker.start()
        finally:
            self._listener.close()
            with self._workers_lock:
                workers = list(self._workers)
            for w in workers:
                w.join()

    def _handle(self, client, addr):
        try:
            summary = _Connection(self, client, addr).run()
        except UpstreamConnectFailed as exc:
            log.error("UpstreamConnectFailed: %s", exc)
            return
        except CaptureWriteFailed as exc:
            log.error("CaptureWriteFailed: %s", exc)
            return
        finally:
            self._slots.release()
            with self._workers_lock:
                self._workers.discard(threading.current_thread())
        if self.on_summary is not None:
            with self._emit_lock:
                self.on_summary(summary)

    def start(self) -> "CaptureProxy":
        self._thread = threading.Thread(target=self.serve_forever, name="capture-proxy", daemon=True)
        self._thread.start()
        self._serving.wait()
        return self

    def shutdown(self) -> None:
        self.stopping.set()
        thread = getattr(self, "_thread", None)
        if thread is not None:
            thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()


def run_proxy(config: ProxyConfig, stop: threading.Event = None) -> Iterator[SessionSummary]:
    """Run the proxy, yielding one summary per finished session until ``stop`` is set."""
    summaries: queue.Queue = queue.Queue()
    proxy = CaptureProxy(config, on_summary=summaries.put).start()
    try:
        while stop is None or not stop.is_set():
            try:
                yield summaries.get(timeout=POLL_S)
            except queue.Empty:
                pass
    finally:
        proxy.shutdown()
    while not summaries.empty():
        yield summaries.get_nowait()
