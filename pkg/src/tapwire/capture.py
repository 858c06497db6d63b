"""Packet/session model and the HYC1 capture file format.

HYC1 layout (big-endian throughout)::

    header   magic "HYC1" | version u16 | session_id 16B | opened_us u64 | record_count u32
    record   seq u64 | timestamp_us u64 | direction u8 | payload_len u32 | payload

Records are stored in seq order, starting at 0 with no gaps.
"""

from __future__ import annotations

import enum
import json
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, Optional

MAGIC = b"HYC1"
VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024

HEADER = struct.Struct(">4sH16sQI")
RECORD = struct.Struct(">QQBI")
# record_count sits at the very end of the header
COUNT_OFFSET = HEADER.size - 4


class CaptureError(Exception):
    """Base class for capture encode/decode failures."""


class PayloadTooLarge(CaptureError):
    pass


class CaptureFormatError(CaptureError):
    """A decode failure; ``offset`` is the first offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class BadMagic(CaptureFormatError):
    pass


class UnsupportedVersion(CaptureFormatError):
    pass


class TruncatedRecord(CaptureFormatError):
    pass


class SeqGap(CaptureFormatError):
    pass


class BadRecord(CaptureFormatError):
    """Invalid direction tag, empty/oversized payload, or trailing garbage."""


class Direction(enum.IntEnum):
    CLIENT_TO_SERVER = 0
    SERVER_TO_CLIENT = 1

    @property
    def short(self) -> str:
        return "c2s" if self is Direction.CLIENT_TO_SERVER else "s2c"

    @classmethod
    def parse(cls, text: str) -> "Direction":
        try:
            return {"c2s": cls.CLIENT_TO_SERVER, "s2c": cls.SERVER_TO_CLIENT}[text]
        except KeyError:
            raise ValueError(f"direction must be c2s or s2c, not {text!r}") from None


@dataclass(frozen=True)
class Packet:
    seq: int
    timestamp_us: int
    direction: Direction
    payload: bytes

    def __post_init__(self):
        if not self.payload:
            raise ValueError("packet payload must not be empty")
        if len(self.payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")
        if self.seq < 0:
            raise ValueError("seq must be non-negative")


@dataclass(frozen=True)
class Session:
    session_id: bytes
    opened_us: int
    packets: tuple[Packet, ...] = ()
    # Peer addresses are informational; HYC1 does not persist them.
    peer_client: str = field(default="", compare=False)
    peer_server: str = field(default="", compare=False)

    def __post_init__(self):
        if len(self.session_id) != 16:
            raise ValueError("session_id must be 16 bytes")
        object.__setattr__(self, "packets", tuple(self.packets))
        for i, p in enumerate(self.packets):
            if p.seq != i:
                raise ValueError(f"packet seq {p.seq} at position {i}; expected {i}")

    @property
    def id_hex(self) -> str:
        return self.session_id.hex()

    def stream(self, direction: Direction) -> list[Packet]:
        return [p for p in self.packets if p.direction == direction]

    def client_stream(self) -> list[Packet]:
        return self.stream(Direction.CLIENT_TO_SERVER)

    def server_stream(self) -> list[Packet]:
        return self.stream(Direction.SERVER_TO_CLIENT)


@dataclass(frozen=True)
class RawData:
    data: bytes = b""

    def __len__(self) -> int:
        return len(self.data)


def new_session_id() -> bytes:
    return os.urandom(16)


def now_us() -> int:
    return time.time_ns() // 1000


def concat_raw(session: Session, direction: Direction) -> RawData:
    """Concatenate payloads travelling in ``direction``, in seq order."""
    return RawData(b"".join(p.payload for p in session.packets if p.direction == direction))


def _encode_header(session_id: bytes, opened_us: int, count: int) -> bytes:
    return HEADER.pack(MAGIC, VERSION, session_id, opened_us, count)


def _encode_record(packet: Packet) -> bytes:
    if len(packet.payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"packet {packet.seq}: {len(packet.payload)} bytes")
    return RECORD.pack(packet.seq, packet.timestamp_us, int(packet.direction), len(packet.payload)) + packet.payload


def encode_capture(session: Session) -> bytes:
    parts = [_encode_header(session.session_id, session.opened_us, len(session.packets))]
    parts.extend(_encode_record(p) for p in session.packets)
    return b"".join(parts)


def decode_capture(data: bytes) -> Session:
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not a HYC1 capture", 0)
    if len(data) < HEADER.size:
        raise TruncatedRecord("header truncated", len(data))
    _, version, session_id, opened_us, count = HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}", 4)

    packets = []
    off = HEADER.size
    for expected_seq in range(count):
        if off + RECORD.size > len(data):
            raise TruncatedRecord(f"record {expected_seq} header truncated", off)
        seq, ts, direction, length = RECORD.unpack_from(data, off)
        if seq != expected_seq:
            raise SeqGap(f"expected seq {expected_seq}, found {seq}", off)
        if direction not in (0, 1):
            raise BadRecord(f"invalid direction {direction}", off + 16)
        if length == 0 or length > MAX_PAYLOAD:
            raise BadRecord(f"invalid payload length {length}", off + 17)
        start = off + RECORD.size
        if start + length > len(data):
            raise TruncatedRecord(f"record {seq} payload truncated", start)
        packets.append(Packet(seq, ts, Direction(direction), data[start:start + length]))
        off = start + length
    if off != len(data):
        raise BadRecord(f"{len(data) - off} trailing bytes after last record", off)
    return Session(session_id, opened_us, tuple(packets))


def read_capture(path) -> Session:
    with open(path, "rb") as f:
        return decode_capture(f.read())


def write_capture(path, session: Session) -> None:
    data = encode_capture(session)
    with open(path, "wb") as f:
        f.write(data)


def ndjson_lines(session: Session) -> Iterator[str]:
    for p in session.packets:
        yield json.dumps(
            {"seq": p.seq, "ts_us": p.timestamp_us, "dir": p.direction.short, "payload_hex": p.payload.hex()},
            separators=(",", ":"),
        )


class SessionBuilder:
    """Single-writer append point for a session under construction.

    Both relay directions call :meth:`append`; seq numbers come from one
    counter guarded by a lock, so packets get a total order across directions.
    When ``sink`` is given, each record is written through to it as soon as
    it is appended and the header's record count is patched on :meth:`finish`.
    ``keep`` controls whether packets are also retained in memory.
    """

    def __init__(self, session_id: Optional[bytes] = None, opened_us: Optional[int] = None,
                 sink: Optional[BinaryIO] = None, keep: bool = True,
                 peer_client: str = "", peer_server: str = ""):
        self.session_id = session_id if session_id is not None else new_session_id()
        self.opened_us = opened_us if opened_us is not None else now_us()
        self.peer_client = peer_client
        self.peer_server = peer_server
        self._lock = threading.Lock()
        self._packets: list[Packet] = []
        self._next_seq = 0
        self._sink = sink
        self._keep = keep
        self.byte_counts = {Direction.CLIENT_TO_SERVER: 0, Direction.SERVER_TO_CLIENT: 0}
        if sink is not None:
            sink.write(_encode_header(self.session_id, self.opened_us, 0))

    @property
    def count(self) -> int:
        return self._next_seq

    def append(self, direction: Direction, payload: bytes, timestamp_us: Optional[int] = None) -> Packet:
        with self._lock:
            packet = Packet(self._next_seq, now_us() if timestamp_us is None else timestamp_us,
                            Direction(direction), bytes(payload))
            if self._sink is not None:
                self._sink.write(_encode_record(packet))
            self._next_seq += 1
            self.byte_counts[packet.direction] += len(packet.payload)
            if self._keep:
                self._packets.append(packet)
            return packet

    def add(self, packet: Packet) -> None:
        """Insert a packet carrying a pre-assigned seq (any arrival order)."""
        with self._lock:
            self._packets.append(packet)

    def finish(self) -> Session:
        with self._lock:
            if self._sink is not None:
                self._sink.flush()
                self._sink.seek(COUNT_OFFSET)
                self._sink.write(struct.pack(">I", self._next_seq))
                self._sink.seek(0, os.SEEK_END)
                self._sink.flush()
            packets = sorted(self._packets, key=lambda p: p.seq)
            return Session(self.session_id, self.opened_us, tuple(packets),
                           peer_client=self.peer_client, peer_server=self.peer_server)


def session_from_packets(session_id: bytes, opened_us: int, packets: Iterable[Packet]) -> Session:
    builder = SessionBuilder(session_id, opened_us)
    for p in packets:
        builder.add(p)
    return builder.finish()
