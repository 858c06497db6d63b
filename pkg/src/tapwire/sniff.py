"""Plaintext credential sniffing over the first client packets of a session."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .capture import Direction, Packet, Session

PRINTABLE = frozenset(range(0x21, 0x7F))


@dataclass(frozen=True)
class SniffRuleSet:
    max_client_packets: int = 4
    token_separators: frozenset = frozenset({0x20, 0x0A, 0x1F})
    auth_markers: tuple[bytes, ...] = (b"AUTH ",)

    def __post_init__(self):
        object.__setattr__(self, "token_separators", frozenset(self.token_separators))
        object.__setattr__(self, "auth_markers", tuple(bytes(m) for m in self.auth_markers))
        if self.max_client_packets < 1:
            raise ValueError("max_client_packets must be >= 1")
        if not self.auth_markers or not all(self.auth_markers):
            raise ValueError("auth_markers must be a non-empty list of non-empty prefixes")


@dataclass(frozen=True)
class CredentialHit:
    session_id: bytes
    packet_seq: int
    username: str
    secret: str = field(repr=False)
    marker: bytes

    def as_dict(self, show_secret: bool = False) -> dict:
        d = {"seq": self.packet_seq, "username": self.username}
        if show_secret:
            d["secret"] = self.secret
        return d


def tokenize(data: bytes, separators) -> list[bytes]:
    tokens, start = [], 0
    for i, b in enumerate(data):
        if b in separators:
            if i > start:
                tokens.append(data[start:i])
            start = i + 1
    if start < len(data):
        tokens.append(data[start:])
    return tokens


def sniff_packets(session_id: bytes, packets: Iterable[Packet], rules: SniffRuleSet) -> list[CredentialHit]:
    hits = []
    seen = 0
    for packet in packets:
        if packet.direction != Direction.CLIENT_TO_SERVER:
            continue
        if seen >= rules.max_client_packets:
            break
        seen += 1
        marker = next((m for m in rules.auth_markers if packet.payload.startswith(m)), None)
        if marker is None:
            continue
        tokens = [t for t in tokenize(packet.payload[len(marker):], rules.token_separators)
                  if PRINTABLE.issuperset(t)]
        if len(tokens) >= 2:
            hits.append(CredentialHit(session_id, packet.seq, tokens[0].decode("ascii"),
                                      tokens[1].decode("ascii"), marker))
    return hits


def sniff_credentials(session: Session, rules: SniffRuleSet = SniffRuleSet()) -> list[CredentialHit]:
    """Extract (username, secret) pairs from early client authentication packets.

    Only the first ``rules.max_client_packets`` client-to-server packets are
    examined; server traffic is never scanned.
    """
    return sniff_packets(session.session_id, session.packets, rules)


def parse_rules(text: str) -> SniffRuleSet:
    """Parse a sniff rules file.

    Directives, one per line (``#`` comments allowed)::

        max_client_packets 4
        separators 20 0a 1f
        marker 41555448 20       # hex bytes, spaces ignored; repeatable
    """
    kwargs: dict = {}
    markers = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        try:
            if key == "max_client_packets":
                kwargs["max_client_packets"] = int(rest)
            elif key == "separators":
                kwargs["token_separators"] = frozenset(bytes.fromhex(rest))
            elif key == "marker":
                markers.append(bytes.fromhex(rest))
            else:
                raise ValueError(f"unknown directive {key!r}")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if markers:
        kwargs["auth_markers"] = tuple(markers)
    return SniffRuleSet(**kwargs)
