"""Deterministic HDP/0 mock server and scripted client.

HDP/0 is a small plaintext protocol shaped like the legacy target: requests
are ``\\n``-terminated lines (``AUTH <user> <password>``, ``GET <table>``,
``QUIT``).  AUTH answers ``OK <license>\\n`` or ``ERR auth\\n``.  GET answers,
after a successful AUTH, with every record framed as STX, then per field
US <name> RS <value>, then ETX; a single EOT ends the reply.
"""

from __future__ import annotations

import json
import logging
import socketserver
import threading
from dataclasses import dataclass
from typing import Sequence, Union

from .netutil import REPLY_TERMINATORS, connect, parse_addr, read_reply

log = logging.getLogger(__name__)

STX, ETX, US, RS, EOT = b"\x02", b"\x03", b"\x1f", b"\x1e", b"\x04"
MAX_LINE = 64 * 1024

ERR_AUTH = b"ERR auth\n"
ERR_TABLE = b"ERR table\n"
ERR_PROTO = b"ERR proto\n"


@dataclass(frozen=True)
class MockDataset:
    users: tuple[tuple[str, str, str], ...]
    tables: dict

    def __post_init__(self):
        users = tuple(tuple(u) for u in self.users)
        tables = {name: tuple(tuple(tuple(f) for f in rec) for rec in recs)
                  for name, recs in dict(self.tables).items()}
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "tables", tables)
        names = [u[0] for u in users]
        if len(set(names)) != len(names):
            raise ValueError("usernames must be unique")
        for u in users:
            if len(u) != 3 or not all(_printable_token(s) for s in u):
                raise ValueError(f"bad user entry {u!r}")
        for name, recs in tables.items():
            if not _printable_token(name):
                raise ValueError(f"bad table name {name!r}")
            for rec in recs:
                for fname, value in rec:
                    if not fname or not _printable(fname) or not _printable(value):
                        raise ValueError(f"bad field ({fname!r}, {value!r}) in table {name}")

    def license_for(self, user: bytes, password: bytes):
        for name, pw, lic in self.users:
            if name.encode() == user and pw.encode() == password:
                return lic
        return None

    @classmethod
    def from_json(cls, text: str) -> "MockDataset":
        obj = json.loads(text)
        return cls(users=obj["users"], tables=obj["tables"])

    @classmethod
    def load(cls, path) -> "MockDataset":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())

    def to_json(self) -> str:
        return json.dumps({"users": [list(u) for u in self.users],
                           "tables": {k: [[list(f) for f in rec] for rec in v] for k, v in self.tables.items()}},
                          indent=2)


def _printable(s: str) -> bool:
    return all(0x20 <= ord(c) <= 0x7E for c in s)


def _printable_token(s: str) -> bool:
    return bool(s) and all(0x21 <= ord(c) <= 0x7E for c in s)


FIXTURE_DATASET = MockDataset(
    users=(("demo", "demo-pass", "LIC-0001"),),
    tables={"contacts": [[("name", "Alice"), ("city", "Berlin")],
                         [("name", "Bob"), ("city", "Kiel")]]},
)


def encode_records(records) -> bytes:
    out = bytearray()
    for rec in records:
        out += STX
        for name, value in rec:
            out += US + name.encode("ascii") + RS + value.encode("ascii")
        out += ETX
    out += EOT
    return bytes(out)


class MockSession:
    """Per-connection HDP/0 state machine: feed one request line, get the reply.

    ``respond`` returns (reply bytes, close_after).
    """

    def __init__(self, dataset: MockDataset):
        self.dataset = dataset
        self.user = None

    def respond(self, line: bytes):
        parts = line.split(b" ")
        cmd = parts[0]
        if cmd == b"AUTH" and len(parts) == 3 and all(parts[1:]):
            lic = self.dataset.license_for(parts[1], parts[2])
            if lic is None:
                self.user = None
                return ERR_AUTH, False
            self.user = parts[1]
            return b"OK " + lic.encode("ascii") + b"\n", False
        if cmd == b"GET" and len(parts) == 2 and parts[1]:
            if self.user is None:
                return ERR_AUTH, False
            records = self.dataset.tables.get(parts[1].decode("latin-1"))
            if records is None:
                return ERR_TABLE, False
            return encode_records(records), False
        if line == b"QUIT":
            return b"", True
        return ERR_PROTO, True


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        state = MockSession(self.server.dataset)
        while True:
            line = self.rfile.readline(MAX_LINE + 1)
            if not line.endswith(b"\n"):
                if len(line) > MAX_LINE:
                    self.wfile.write(ERR_PROTO)
                return
            reply, close = state.respond(line[:-1])
            if reply:
                self.wfile.write(reply)
            if close:
                return


class MockServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, dataset: MockDataset = FIXTURE_DATASET):
        if isinstance(addr, str):
            addr = parse_addr(addr)
        self.dataset = dataset
        super().__init__(addr, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "MockServer":
        threading.Thread(target=self.serve_forever, name="mock-server", daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_mock(addr, dataset: MockDataset = FIXTURE_DATASET, stop: threading.Event = None) -> None:
    """Serve HDP/0 on ``addr`` until ``stop`` is set (or forever)."""
    with MockServer(addr, dataset) as server:
        log.info("mock server listening on %s", server.address)
        if stop is None:
            threading.Event().wait()
        else:
            stop.wait()


def scripted_client(addr, script: Sequence[Union[str, bytes]], timeout_s: float = 5.0,
                    terminators: bytes = REPLY_TERMINATORS) -> list[tuple[bytes, bytes]]:
    """Send each command line and collect its complete reply.

    Returns the transcript as (sent, received) pairs.  QUIT, or any reply
    ending in connection close, stops the script early.
    """
    transcript = []
    sock = connect(addr)
    try:
        for cmd in script:
            if isinstance(cmd, str):
                cmd = cmd.encode("ascii")
            sent = cmd if cmd.endswith(b"\n") else cmd + b"\n"
            sock.sendall(sent)
            reply, eof = read_reply(sock, timeout_s, terminators)
            transcript.append((sent, reply))
            if eof:
                break
    finally:
        sock.close()
    return transcript


def load_command_script(path) -> list[str]:
    with open(path, encoding="ascii") as f:
        return [line.rstrip("\r\n") for line in f if line.strip() and not line.startswith("#")]
