"""tapwire command-line entry point.

Exit codes: 0 success, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading

from . import capture, cleanse, mock, proxy, replay, sniff
from .netutil import ConnectFailed, ReplyTimeout

log = logging.getLogger("tapwire")

OK, FAILED, USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _write_out(path, data: bytes):
    if path is None or path == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    else:
        with open(path, "wb") as f:
            f.write(data)


def _print_line(line: str):
    sys.stdout.write(line + "\n")
    sys.stdout.flush()


def _json(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def _load_rules(path) -> sniff.SniffRuleSet:
    if not path:
        return sniff.SniffRuleSet()
    with open(path, encoding="ascii") as f:
        return sniff.parse_rules(f.read())


def _stop_event() -> threading.Event:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    return stop


def cmd_proxy(args):
    rules = _load_rules(args.sniff_rules)
    try:
        config = proxy.ProxyConfig(args.listen, args.upstream, args.capture_dir, rules,
                                   max_sessions=args.max_sessions, idle_timeout_s=args.idle_timeout)
    except ValueError as exc:
        raise UsageError(str(exc))
    stop = _stop_event()
    log.info("proxy %s -> %s, captures in %s", args.listen, args.upstream, args.capture_dir)
    for summary in proxy.run_proxy(config, stop):
        _print_line(summary.to_json(show_secrets=args.show_secrets))
    return OK


def cmd_sniff(args):
    rules = _load_rules(args.rules)
    session = capture.read_capture(args.capture)
    for hit in sniff.sniff_credentials(session, rules):
        record = {"session_id": session.id_hex, **hit.as_dict(args.show_secrets)}
        _print_line(_json(record))
    return OK


def cmd_extract(args):
    session = capture.read_capture(args.capture)
    spec = cleanse.load_spec(args.spec)
    raw = capture.concat_raw(session, capture.Direction.parse(args.direction))
    if args.raw:
        data = cleanse.strip_delimiters(raw, spec)
    else:
        data = cleanse.to_xml(cleanse.build_structure(raw, spec))
    _write_out(args.out, data)
    return OK


def cmd_export(args):
    session = capture.read_capture(args.capture)
    text = "".join(line + "\n" for line in capture.ndjson_lines(session))
    _write_out(args.out, text.encode("ascii"))
    return OK


def cmd_script_build(args):
    session = capture.read_capture(args.capture)
    replay.save_script(args.out, replay.build_script(session))
    return OK


def cmd_script_mark(args):
    try:
        start, end = (int(x) for x in args.range.split(":"))
    except ValueError:
        raise UsageError(f"--range must be START:END, got {args.range!r}")
    script = replay.load_script(args.script)
    script = replay.mark_placeholder(script, args.step, (start, end), args.name)
    replay.save_script(args.out or args.script, script)
    return OK


def _parse_bindings(args) -> dict:
    bindings = {}
    pairs = [(b, True) for b in args.bind] + [(b, False) for b in args.bind_str]
    for text, is_hex in pairs:
        name, sep, value = text.partition("=")
        if not sep or not name:
            raise UsageError(f"binding must be name=value, got {text!r}")
        if name in bindings:
            raise UsageError(f"placeholder {name} bound twice")
        try:
            bindings[name] = bytes.fromhex(value) if is_hex else value.encode("utf-8")
        except ValueError:
            raise UsageError(f"binding {name}: value is not hex")
    return bindings


def cmd_replay(args):
    script = replay.load_script(args.script)
    bindings = [replay.Substitution(k, v) for k, v in _parse_bindings(args).items()]
    result = replay.run_replay(script, bindings, args.server, capture_out=args.capture_out)
    s = result.session
    _print_line(_json({
        "session_id": s.id_hex,
        "c2s_bytes": len(capture.concat_raw(s, capture.Direction.CLIENT_TO_SERVER)),
        "s2c_bytes": len(capture.concat_raw(s, capture.Direction.SERVER_TO_CLIENT)),
        "timed_out_steps": result.timed_out_steps,
        "closed_early": result.closed_early,
    }))
    if result.timed_out_steps:
        log.error("ReplyTimeout on steps %s", result.timed_out_steps)
        return FAILED
    return OK


def cmd_mock_serve(args):
    dataset = mock.MockDataset.load(args.dataset) if args.dataset else mock.FIXTURE_DATASET
    stop = _stop_event()
    with mock.MockServer(args.listen, dataset) as server:
        log.info("mock server listening on %s", server.address)
        stop.wait()
    return OK


def cmd_mock_client(args):
    commands = mock.load_command_script(args.script)
    for sent, received in mock.scripted_client(args.server, commands, timeout_s=args.timeout):
        _print_line(_json({"sent_hex": sent.hex(), "received_hex": received.hex()}))
    return OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tapwire", description="Capture, sniff, replay and cleanse legacy TCP traffic.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    sp = sub.add_parser("proxy", help="run the capturing man-in-the-middle proxy")
    sp.add_argument("--listen", required=True, metavar="HOST:PORT")
    sp.add_argument("--upstream", required=True, metavar="HOST:PORT")
    sp.add_argument("--capture-dir", required=True)
    sp.add_argument("--sniff-rules", metavar="FILE")
    sp.add_argument("--show-secrets", action="store_true", help="include sniffed secrets in summaries")
    sp.add_argument("--max-sessions", type=int, default=64)
    sp.add_argument("--idle-timeout", type=float, default=300, metavar="SECONDS")
    sp.set_defaults(func=cmd_proxy)

    sp = sub.add_parser("sniff", help="report plaintext credentials in a capture")
    sp.add_argument("--capture", required=True)
    sp.add_argument("--rules", metavar="FILE")
    sp.add_argument("--show-secrets", action="store_true")
    sp.set_defaults(func=cmd_sniff)

    sp = sub.add_parser("extract", help="cleanse captured data into XML (or raw text)")
    sp.add_argument("--capture", required=True)
    sp.add_argument("--spec", required=True, help="delimiter rules file")
    sp.add_argument("--direction", choices=("c2s", "s2c"), default="s2c")
    sp.add_argument("--raw", action="store_true", help="write delimiter-stripped bytes instead of XML")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("export", help="dump a capture as NDJSON")
    sp.add_argument("--capture", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("script", help="build or edit replay scripts")
    script_sub = sp.add_subparsers(dest="script_command", metavar="ACTION")
    script_sub.required = True
    ssp = script_sub.add_parser("build", help="derive a replay script from a capture")
    ssp.add_argument("--capture", required=True)
    ssp.add_argument("--out", required=True)
    ssp.set_defaults(func=cmd_script_build)
    ssp = script_sub.add_parser("mark", help="mark a byte range of a step as a placeholder")
    ssp.add_argument("--script", required=True)
    ssp.add_argument("--step", type=int, required=True)
    ssp.add_argument("--range", required=True, metavar="START:END")
    ssp.add_argument("--name", required=True)
    ssp.add_argument("--out", help="write here instead of editing in place")
    ssp.set_defaults(func=cmd_script_mark)

    sp = sub.add_parser("replay", help="drive a server with a replay script")
    sp.add_argument("--script", required=True)
    sp.add_argument("--server", required=True, metavar="HOST:PORT")
    sp.add_argument("--bind", action="append", default=[], metavar="NAME=HEX")
    sp.add_argument("--bind-str", action="append", default=[], metavar="NAME=STRING")
    sp.add_argument("--capture-out")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("mock-serve", help="run the HDP/0 mock server")
    sp.add_argument("--listen", required=True, metavar="HOST:PORT")
    sp.add_argument("--dataset", help="JSON dataset (default: built-in fixture)")
    sp.set_defaults(func=cmd_mock_serve)

    sp = sub.add_parser("mock-client", help="run a scripted HDP/0 client")
    sp.add_argument("--server", required=True, metavar="HOST:PORT")
    sp.add_argument("--script", required=True, help="one command per line")
    sp.add_argument("--timeout", type=float, default=5.0)
    sp.set_defaults(func=cmd_mock_client)
    return p


OPERATIONAL_ERRORS = (
    OSError,
    capture.CaptureError,
    cleanse.SpecError,
    replay.ScriptError,
    proxy.ProxyError,
    ConnectFailed,
    ReplyTimeout,
    ValueError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE if exc.code else OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tapwire: error: {exc}", file=sys.stderr)
        return USAGE
    except OPERATIONAL_ERRORS as exc:
        print(f"tapwire: {type(exc).__name__}: {exc}", file=sys.stderr)
        return FAILED


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
