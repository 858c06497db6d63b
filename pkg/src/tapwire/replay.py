"""Standalone-client replay of captured sessions.

A captured session becomes a :class:`ReplayScript`: one step per
client-to-server packet, with the payload as its template.  Byte ranges of a
template can be marked as named placeholders and re-bound at replay time, so
captured commands can be re-targeted without knowing the full protocol.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

from .capture import Direction, Session, SessionBuilder, write_capture
from .netutil import REPLY_TERMINATORS, ReplyTimeout, connect, read_reply

log = logging.getLogger(__name__)


class ScriptError(ValueError):
    pass


class EmptyClientStream(ScriptError):
    pass


class RangeOutOfBounds(ScriptError):
    pass


class OverlappingPlaceholder(ScriptError):
    pass


class DuplicateName(ScriptError):
    pass


class UnboundPlaceholder(ScriptError):
    pass


@dataclass(frozen=True)
class Placeholder:
    name: str
    start: int
    end: int


@dataclass(frozen=True)
class ReplayStep:
    template: bytes
    placeholders: tuple[Placeholder, ...] = ()
    expect_reply: bool = True
    reply_timeout_ms: int = 2000

    def __post_init__(self):
        spans = sorted(self.placeholders, key=lambda p: p.start)
        object.__setattr__(self, "placeholders", tuple(spans))
        for p in spans:
            if not 0 <= p.start < p.end <= len(self.template):
                raise RangeOutOfBounds(f"placeholder {p.name} [{p.start},{p.end}) outside template")
        for a, b in zip(spans, spans[1:]):
            if b.start < a.end:
                raise OverlappingPlaceholder(f"{a.name} overlaps {b.name}")
        if self.reply_timeout_ms <= 0:
            raise ScriptError("reply_timeout_ms must be positive")

    def render(self, bindings: Mapping[str, bytes]) -> bytes:
        out, pos = [], 0
        for p in self.placeholders:
            if p.name not in bindings:
                raise UnboundPlaceholder(p.name)
            out.append(self.template[pos:p.start])
            out.append(bindings[p.name])
            pos = p.end
        out.append(self.template[pos:])
        return b"".join(out)


@dataclass(frozen=True)
class ReplayScript:
    source_session: bytes
    steps: tuple[ReplayStep, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    def placeholder_names(self) -> list[str]:
        return [p.name for s in self.steps for p in s.placeholders]

    def render(self, bindings: Mapping[str, bytes] = {}) -> list[bytes]:
        missing = [n for n in self.placeholder_names() if n not in bindings]
        if missing:
            raise UnboundPlaceholder(", ".join(missing))
        return [s.render(bindings) for s in self.steps]


@dataclass(frozen=True)
class Substitution:
    name: str
    value: bytes


def build_script(session: Session) -> ReplayScript:
    packets = session.packets
    steps = []
    for i, p in enumerate(packets):
        if p.direction != Direction.CLIENT_TO_SERVER:
            continue
        # answered iff a server packet comes before the next client packet
        answered = i + 1 < len(packets) and packets[i + 1].direction == Direction.SERVER_TO_CLIENT
        steps.append(ReplayStep(p.payload, expect_reply=answered))
    if not steps:
        raise EmptyClientStream("session has no client-to-server packets")
    return ReplayScript(session.session_id, tuple(steps))


def mark_placeholder(script: ReplayScript, step_index: int, byte_range: tuple[int, int], name: str) -> ReplayScript:
    if not 0 <= step_index < len(script.steps):
        raise RangeOutOfBounds(f"no step {step_index}")
    if name in script.placeholder_names():
        raise DuplicateName(name)
    if not name or any(c.isspace() for c in name):
        raise ScriptError(f"invalid placeholder name {name!r}")
    start, end = byte_range
    step = script.steps[step_index]
    new_step = replace(step, placeholders=step.placeholders + (Placeholder(name, start, end),))
    steps = list(script.steps)
    steps[step_index] = new_step
    return replace(script, steps=tuple(steps))


@dataclass
class ReplayResult:
    session: Session
    timed_out_steps: list[int] = field(default_factory=list)
    closed_early: bool = False

    @property
    def ok(self) -> bool:
        return not self.timed_out_steps


def _as_bindings(bindings) -> dict:
    if isinstance(bindings, Mapping):
        return {k: bytes(v) for k, v in bindings.items()}
    out = {}
    for b in bindings:
        if b.name in out:
            raise ScriptError(f"placeholder {b.name} bound twice")
        out[b.name] = bytes(b.value)
    return out


def run_replay(script: ReplayScript, bindings: Sequence[Substitution] = (), server_addr: str = "",
               capture_out=None, terminators: bytes = REPLY_TERMINATORS) -> ReplayResult:
    """Drive ``server_addr`` with the script and capture the exchange.

    All placeholders are checked before connecting.  A reply that does not
    complete in time is recorded in ``timed_out_steps`` and the replay moves on;
    the partial data is kept in the session.
    """
    payloads = script.render(_as_bindings(bindings))
    sock = connect(server_addr)
    peer = f"{sock.getsockname()[0]}:{sock.getsockname()[1]}"
    builder = SessionBuilder(peer_client=peer, peer_server=server_addr)
    result = ReplayResult(session=None)
    on_chunk = lambda chunk: builder.append(Direction.SERVER_TO_CLIENT, chunk)
    try:
        for index, (step, payload) in enumerate(zip(script.steps, payloads)):
            if payload:
                builder.append(Direction.CLIENT_TO_SERVER, payload)
                try:
                    sock.sendall(payload)
                except OSError as exc:
                    log.warning("step %d: send failed: %s", index, exc)
                    result.closed_early = True
                    break
            if not step.expect_reply:
                continue
            try:
                _, eof = read_reply(sock, step.reply_timeout_ms / 1000, terminators, on_chunk)
            except ReplyTimeout:
                log.warning("step %d: reply timed out", index)
                result.timed_out_steps.append(index)
                continue
            except OSError as exc:
                log.warning("step %d: receive failed: %s", index, exc)
                result.closed_early = True
                break
            if eof:
                result.closed_early = True
                break
    finally:
        sock.close()
    result.session = builder.finish()
    if capture_out is not None:
        write_capture(capture_out, result.session)
    return result


def format_script(script: ReplayScript) -> str:
    lines = [f"source {script.source_session.hex()}"]
    for i, s in enumerate(script.steps):
        lines.append(f"step {i} payload_hex={s.template.hex()} expect_reply={int(s.expect_reply)} "
                     f"timeout_ms={s.reply_timeout_ms}")
    for i, s in enumerate(script.steps):
        for p in s.placeholders:
            lines.append(f"placeholder {i} {p.start} {p.end} {p.name}")
    return "\n".join(lines) + "\n"


def parse_script(text: str) -> ReplayScript:
    source: Optional[bytes] = None
    steps: list[ReplayStep] = []
    marks = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "source" and len(parts) == 2:
                source = bytes.fromhex(parts[1])
            elif parts[0] == "step" and len(parts) == 5:
                if int(parts[1]) != len(steps):
                    raise ScriptError(f"step index {parts[1]} out of order")
                kv = dict(p.split("=", 1) for p in parts[2:])
                if kv["expect_reply"] not in ("0", "1"):
                    raise ScriptError("expect_reply must be 0 or 1")
                steps.append(ReplayStep(bytes.fromhex(kv["payload_hex"]),
                                        expect_reply=kv["expect_reply"] == "1",
                                        reply_timeout_ms=int(kv["timeout_ms"])))
            elif parts[0] == "placeholder" and len(parts) == 5:
                marks.append((int(parts[1]), int(parts[2]), int(parts[3]), parts[4]))
            else:
                raise ScriptError(f"unrecognized directive {line!r}")
        except (ValueError, KeyError) as exc:
            raise ScriptError(f"line {lineno}: {exc}") from None
    if source is None or len(source) != 16:
        raise ScriptError("missing or invalid source line")
    script = ReplayScript(source, tuple(steps))
    for step_index, start, end, name in marks:
        script = mark_placeholder(script, step_index, (start, end), name)
    return script


def load_script(path) -> ReplayScript:
    with open(path, encoding="ascii") as f:
        return parse_script(f.read())


def save_script(path, script: ReplayScript) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(format_script(script))
