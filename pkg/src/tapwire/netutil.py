import socket
import time

REPLY_TERMINATORS = b"\x04\n"
CHUNK = 64 * 1024


class ConnectFailed(OSError):
    pass


class ReplyTimeout(TimeoutError):
    def __init__(self, message, partial=b""):
        super().__init__(message)
        self.partial = partial


def parse_addr(text):
    """Split ``host:port`` (IPv6 hosts may be bracketed)."""
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    host = host.strip("[]") or "127.0.0.1"
    return host, int(port)


def format_addr(addr):
    host, port = addr[:2]
    return f"[{host}]:{port}" if ":" in host else f"{host}:{port}"


def connect(addr, timeout=5.0):
    host, port = parse_addr(addr) if isinstance(addr, str) else addr
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectFailed(f"cannot connect to {host}:{port}: {exc}") from exc
    sock.settimeout(None)
    return sock


def read_reply(sock, timeout_s, terminators=REPLY_TERMINATORS, on_chunk=None):
    """Read until the data ends in a terminator byte, EOF, or timeout.

    Returns (reply bytes, eof).  Raises ReplyTimeout carrying the partial reply.
    ``on_chunk`` sees every received chunk, in order.
    """
    buf = bytearray()
    deadline = time.monotonic() + timeout_s
    try:
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ReplyTimeout(f"no complete reply within {timeout_s:g}s", bytes(buf))
            sock.settimeout(remaining)
            try:
                chunk = sock.recv(CHUNK)
            except socket.timeout:
                raise ReplyTimeout(f"no complete reply within {timeout_s:g}s", bytes(buf)) from None
            if not chunk:
                return bytes(buf), True
            if on_chunk is not None:
                on_chunk(chunk)
            buf += chunk
            if buf[-1] in terminators:
                return bytes(buf), False
    finally:
        sock.settimeout(None)
