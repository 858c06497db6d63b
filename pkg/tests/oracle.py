"""Independent brute-force model of the cleanse scan, used only by tests.

Quadratic re-scan: from the current position, look up the earliest occurrence
of every candidate sequence with ``bytes.find`` and take the smallest
(position, precedence) pair, then recurse into opened elements.  Shares no
code with tapwire.cleanse.
"""

import sys

MAX_DEPTH = 1024

sys.setrecursionlimit(max(sys.getrecursionlimit(), 20000))


def oracle_events(data, rules):
    """Return the event list (open/text/close) the scan should produce.

    ``rules`` is a list of (name, open_bytes, close_bytes).
    """
    out = [("open", "extract", False)]
    # the root sits at depth 0 and never reaches the cap
    child, _, _, _ = _parse_children(data, rules, 0, None, 0)
    out.extend(child)
    out.append(("close",))
    return _merge_text(out)


def _earliest(data, rules, pos, current):
    best = None
    if current is not None:
        q = data.find(rules[current][2], pos)
        if q >= 0:
            best = (q, 0, "close", current)
    for i, (_, open_seq, _) in enumerate(rules):
        q = data.find(open_seq, pos)
        if q >= 0 and (best is None or (q, i + 1) < best[:2]):
            best = (q, i + 1, "open", i)
    return best


def _parse_children(data, rules, pos, current, depth):
    """Parse content of an element (``current`` rule index, None for root).

    Returns (events, new_pos, forced, how).  ``how`` is "closed", "eof" or
    "capped"; when capped, ``forced`` is the rule index of the open that hit
    the depth cap and the caller opens it at new_pos as a sibling.
    """
    events = []
    while True:
        hit = _earliest(data, rules, pos, current)
        if hit is None:
            if pos < len(data):
                events.append(("text", data[pos:]))
            return events, len(data), None, "eof"
        q, _, kind, idx = hit
        if q > pos:
            events.append(("text", data[pos:q]))
        if kind == "close":
            return events, q + len(rules[idx][2]), None, "closed"
        after_open = q + len(rules[idx][1])
        if depth == MAX_DEPTH:
            # too deep: this element ends here, the open goes to the parent
            return events, after_open, idx, "capped"
        pos = _open_child(data, rules, after_open, idx, depth + 1, events)


def _open_child(data, rules, pos, idx, depth, events):
    while True:
        child, pos, forced, how = _parse_children(data, rules, pos, idx, depth)
        events.append(("open", rules[idx][0], how != "closed"))
        events.extend(child)
        events.append(("close",))
        if forced is None:
            return pos
        idx = forced


def _merge_text(evs):
    merged = []
    for ev in evs:
        if ev[0] == "text" and merged and merged[-1][0] == "text":
            merged[-1] = ("text", merged[-1][1] + ev[1])
        else:
            merged.append(ev)
    return merged


def oracle_strip(data, rules):
    return b"".join(ev[1] for ev in oracle_events(data, rules) if ev[0] == "text")
