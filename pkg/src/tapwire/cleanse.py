"""Delimiter-driven data cleansing: raw bytes to an element tree to XML.

The operator supplies rules mapping an introduction (open) byte sequence and
a termination (close) byte sequence to an element name.  ``build_structure``
scans the raw data once, left to right, keeping a stack of open elements:

1. the innermost element's close sequence matching here pops it;
2. otherwise the first rule (declaration order) whose open sequence matches
   pushes a new element;
3. otherwise the byte is text of the current element.

Consumed delimiter occurrences are dropped; everything else is kept in order.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Union

from .capture import RawData

ROOT = "extract"
MAX_DEPTH = 1024
MAX_DELIMITER_LEN = 8
XML_DECL = '<?xml version="1.0" encoding="UTF-8"?>'

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.-]*\Z")


class SpecError(ValueError):
    pass


class MalformedXml(ValueError):
    pass


@dataclass(frozen=True)
class DelimiterRule:
    element_name: str
    open: bytes
    close: bytes

    def __post_init__(self):
        if not _NAME_RE.match(self.element_name) or self.element_name.lower().startswith("xml"):
            raise SpecError(f"invalid element name {self.element_name!r}")
        for what, seq in (("open", self.open), ("close", self.close)):
            if not 1 <= len(seq) <= MAX_DELIMITER_LEN:
                raise SpecError(f"{self.element_name}: {what} sequence must be 1..{MAX_DELIMITER_LEN} bytes")


@dataclass(frozen=True)
class DelimiterSpec:
    rules: tuple[DelimiterRule, ...]
    text_policy: str = "ascii-escape"

    def __post_init__(self):
        rules = tuple(self.rules)
        object.__setattr__(self, "rules", rules)
        if self.text_policy != "ascii-escape":
            raise SpecError(f"unknown text policy {self.text_policy!r}")
        names = [r.element_name for r in rules]
        if len(set(names)) != len(names):
            raise SpecError("element names must be unique")
        opens = [r.open for r in rules]
        if len(set(opens)) != len(opens):
            raise SpecError("open sequences must be distinct")
        closes = {r.close for r in rules}
        clash = closes.intersection(opens)
        if clash:
            raise SpecError(f"sequence {sorted(clash)[0].hex()} is both an open and a close")

    @property
    def symbol_count(self) -> int:
        return sum(len(r.open) + len(r.close) for r in self.rules)


def parse_spec(text: str) -> DelimiterSpec:
    """Parse the line-based rule format (``rule <name> open=<hex> close=<hex>``)."""
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] != "rule" or len(parts) != 4:
                raise ValueError("expected: rule <name> open=<hex> close=<hex>")
            kv = dict(p.split("=", 1) for p in parts[2:])
            rules.append(DelimiterRule(parts[1], bytes.fromhex(kv["open"]), bytes.fromhex(kv["close"])))
        except (ValueError, KeyError) as exc:
            raise SpecError(f"line {lineno}: {exc}") from None
    return DelimiterSpec(tuple(rules))


def format_spec(spec: DelimiterSpec) -> str:
    return "".join(f"rule {r.element_name} open={r.open.hex()} close={r.close.hex()}\n" for r in spec.rules)


def load_spec(path) -> DelimiterSpec:
    with open(path, encoding="utf-8") as f:
        return parse_spec(f.read())


class Text(NamedTuple):
    data: bytes

    def __eq__(self, other):
        if not isinstance(other, Text):
            return NotImplemented
        return self.data == other.data

    def __ne__(self, other):
        eq = self.__eq__(other)
        return eq if eq is NotImplemented else not eq

    __hash__ = tuple.__hash__


class Element(NamedTuple):
    """Immutable element node; equality is structural and depth-safe."""

    name: str
    children: tuple = ()
    unterminated: bool = False

    def __eq__(self, other):
        if not isinstance(other, Element):
            return NotImplemented
        return list(events(self)) == list(events(other))

    def __ne__(self, other):
        eq = self.__eq__(other)
        return eq if eq is NotImplemented else not eq

    __hash__ = None


Node = Union[Element, Text]


@dataclass(frozen=True, eq=False)
class StructuredDocument:
    root: Element = field(default_factory=lambda: Element(ROOT))

    def __eq__(self, other):
        if not isinstance(other, StructuredDocument):
            return NotImplemented
        return self.root == other.root

    __hash__ = None


def events(node: Node) -> Iterator[tuple]:
    """Flatten a tree into ("open", name, unterminated) / ("text", bytes) / ("close",) events.

    Iterative, so it is safe at any nesting depth.
    """
    stack: list = [node]
    while stack:
        item = stack.pop()
        if item is _CLOSE:
            yield ("close",)
        elif isinstance(item, Text):
            yield ("text", item.data)
        else:
            yield ("open", item.name, item.unterminated)
            stack.append(_CLOSE)
            stack.extend(reversed(item.children))


_CLOSE = object()


def from_events(evs: Iterable[tuple]) -> Element:
    """Rebuild a tree from :func:`events` output, merging adjacent text."""
    stack: list[tuple[str, bool, list]] = []
    result = None
    for ev in evs:
        kind = ev[0]
        if kind == "open":
            stack.append((ev[1], ev[2], []))
        elif kind == "text":
            if not ev[1]:
                continue
            children = stack[-1][2]
            if children and isinstance(children[-1], Text):
                children[-1] = Text(children[-1].data + ev[1])
            else:
                children.append(Text(ev[1]))
        else:
            name, unterminated, children = stack.pop()
            el = Element(name, tuple(children), unterminated)
            if stack:
                stack[-1][2].append(el)
            else:
                result = el
    if stack or result is None:
        raise ValueError("unbalanced event stream")
    return result


@functools.lru_cache(maxsize=64)
def _compile(spec: DelimiterSpec) -> list[re.Pattern]:
    """One pattern per possible innermost element (index -1 is the root).

    Alternation order encodes precedence: innermost close, then opens in
    declaration order.  Group 1 is the close; group i+2 is rule i's open.
    """
    opens = "".join(f"|({re.escape(r.open.decode('latin-1'))})" for r in spec.rules)
    patterns = [re.compile(f"({re.escape(r.close.decode('latin-1'))}){opens}".encode("latin-1"), re.DOTALL)
                for r in spec.rules]
    # root has no close; the empty-never-matching group keeps group numbering aligned
    patterns.append(re.compile(f"((?!)){opens}".encode("latin-1"), re.DOTALL))
    return patterns


def build_structure(raw: Union[RawData, bytes], spec: DelimiterSpec) -> StructuredDocument:
    data = raw.data if isinstance(raw, RawData) else bytes(raw)
    patterns = _compile(spec)

    names = [r.element_name for r in spec.rules]
    # frames: (rule_index, children); the root frame has index -1
    stack: list[tuple[int, list]] = [(-1, [])]
    children = stack[0][1]
    pattern = patterns[-1]
    pos = 0
    n = len(data)

    while pos < n:
        m = pattern.search(data, pos)
        if m is None:
            break
        start, end = m.span()
        if start > pos:
            children.append(Text(data[pos:start]))
        group = m.lastindex
        if group == 1:
            index, kids = stack.pop()
            children = stack[-1][1]
            children.append(Element(names[index], tuple(kids)))
        else:
            if len(stack) > MAX_DEPTH:
                index, kids = stack.pop()
                stack[-1][1].append(Element(names[index], tuple(kids), True))
            children = []
            stack.append((group - 2, children))
        pattern = patterns[stack[-1][0]]
        pos = end

    if pos < n:
        children.append(Text(data[pos:]))
    while len(stack) > 1:
        index, kids = stack.pop()
        stack[-1][1].append(Element(names[index], tuple(kids), True))
    return StructuredDocument(Element(ROOT, tuple(stack[0][1])))


def text_bytes(node: Union[StructuredDocument, Node]) -> bytes:
    if isinstance(node, StructuredDocument):
        node = node.root
    return b"".join(ev[1] for ev in events(node) if ev[0] == "text")


def strip_delimiters(raw: Union[RawData, bytes], spec: DelimiterSpec) -> bytes:
    """Raw data with every consumed open/close occurrence removed."""
    return text_bytes(build_structure(raw, spec))


def consumed_delimiter_bytes(doc: StructuredDocument, spec: DelimiterSpec) -> int:
    """Total length of delimiter occurrences consumed while building ``doc``."""
    by_name = {r.element_name: r for r in spec.rules}
    total = 0
    for ev in events(doc.root):
        if ev[0] == "open" and ev[1] in by_name:
            rule = by_name[ev[1]]
            total += len(rule.open) + (0 if ev[2] else len(rule.close))
    return total


# --- XML serialization -------------------------------------------------------

def _escape_table() -> list[str]:
    table = []
    for b in range(256):
        if b == 0x26:
            table.append("&amp;")
        elif b == 0x3C:
            table.append("&lt;")
        elif b == 0x3E:
            table.append("&gt;")
        elif 0x20 <= b <= 0x7E and b != 0x5C:
            table.append(chr(b))
        else:
            # backslash is escaped too so that \xHH stays unambiguous
            table.append(f"\\x{b:02x}")
    return table


_ESCAPE = _escape_table()
_PLAIN = bytes(b for b in range(0x20, 0x7F) if b not in b"&<>\\")
_PLAIN_RE = re.compile(b"[" + re.escape(_PLAIN) + b"]+")


def escape_text(data: bytes) -> str:
    out = []
    pos = 0
    for m in _PLAIN_RE.finditer(data):
        out.extend(_ESCAPE[b] for b in data[pos:m.start()])
        out.append(m.group().decode("ascii"))
        pos = m.end()
    out.extend(_ESCAPE[b] for b in data[pos:])
    return "".join(out)


def to_xml(doc: StructuredDocument) -> bytes:
    out = [XML_DECL]
    out.extend(tag for _, tag in _tags(doc.root))
    return "".join(out).encode("utf-8")


def _tags(root: Element) -> Iterator[tuple]:
    stack: list = [root]
    while stack:
        item = stack.pop()
        if isinstance(item, str):
            yield ("end", item)
        elif isinstance(item, Text):
            yield ("text", escape_text(item.data))
        else:
            attr = ' unterminated="1"' if item.unterminated else ""
            if not item.children:
                yield ("empty", f"<{item.name}{attr}/>")
            else:
                yield ("start", f"<{item.name}{attr}>")
                stack.append(f"</{item.name}>")
                stack.extend(reversed(item.children))


_TOKEN_RE = re.compile(
    r"<(/?)([A-Za-z_][A-Za-z0-9_.-]*)( unterminated=\"1\")?(/?)>"
    r"|&(amp|lt|gt);"
    r"|\\x([0-9a-f]{2})"
    r"|([\x20-\x25\x27-\x3b\x3d\x3f-\x5b\x5d-\x7e]+)"
)
_UNESCAPE = {"amp": b"&", "lt": b"<", "gt": b">"}
_ESCAPED_BYTES = frozenset(b for b in range(256) if not (0x20 <= b <= 0x7E) or b == 0x5C)


def from_xml(text: Union[bytes, str]) -> StructuredDocument:
    """Parse XML produced by :func:`to_xml`; anything else raises MalformedXml."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedXml(f"not UTF-8: {exc}") from None
    if not text.startswith(XML_DECL):
        raise MalformedXml("missing XML declaration")
    pos = len(XML_DECL)
    n = len(text)
    evs: list[tuple] = []
    open_names: list[str] = []
    done = False
    while pos < n:
        if done:
            raise MalformedXml(f"content after root element at {pos}")
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise MalformedXml(f"unexpected character {text[pos]!r} at {pos}")
        closing, name, unterm, empty, entity, hexbyte, plain = m.groups()
        if name is not None:
            if closing:
                if unterm or empty:
                    raise MalformedXml(f"bad end tag at {pos}")
                if not open_names or open_names[-1] != name:
                    raise MalformedXml(f"mismatched </{name}> at {pos}")
                if evs[-1][0] == "open":
                    # to_xml writes childless elements as <a/>
                    raise MalformedXml(f"empty element written as a tag pair at {pos}")
                open_names.pop()
                evs.append(("close",))
            else:
                if not open_names and (name != ROOT or unterm or evs):
                    raise MalformedXml(f"root must be a single <{ROOT}> element")
                evs.append(("open", name, bool(unterm)))
                if empty:
                    evs.append(("close",))
                else:
                    open_names.append(name)
            done = not open_names
        else:
            if not open_names:
                raise MalformedXml(f"text outside root at {pos}")
            if entity:
                data = _UNESCAPE[entity]
            elif hexbyte:
                b = int(hexbyte, 16)
                if b not in _ESCAPED_BYTES:
                    raise MalformedXml(f"byte {hexbyte} must not be escaped at {pos}")
                data = bytes([b])
            else:
                data = plain.encode("ascii")
            evs.append(("text", data))
        pos = m.end()
    if not done:
        raise MalformedXml("unexpected end of document")
    return StructuredDocument(from_events(evs))
