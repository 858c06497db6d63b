import json
import os
import signal
import subprocess
import sys
import time

import pytest

from conftest import FIXTURES, SPEC_PATH, free_port
from tapwire import capture, cleanse
from tapwire.cli import main


@pytest.fixture
def golden_file(tmp_path, golden_bytes):
    path = tmp_path / "s.hyc"
    path.write_bytes(golden_bytes)
    return path


def test_extract_golden(golden_file, tmp_path):
    out = tmp_path / "out.xml"
    rc = main(["extract", "--capture", str(golden_file), "--spec", str(SPEC_PATH),
               "--direction", "s2c", "--out", str(out)])
    assert rc == 0
    assert out.read_bytes() == (FIXTURES / "golden.xml").read_bytes()


def test_extract_defaults_to_s2c_and_is_idempotent(golden_file, capsysbinary):
    args = ["extract", "--capture", str(golden_file), "--spec", str(SPEC_PATH)]
    assert main(args) == 0
    first = capsysbinary.readouterr().out
    assert main(args) == 0
    assert capsysbinary.readouterr().out == first == (FIXTURES / "golden.xml").read_bytes()


def test_extract_raw_mode(golden_file, capsysbinary):
    assert main(["extract", "--capture", str(golden_file), "--spec", str(SPEC_PATH), "--raw"]) == 0
    assert capsysbinary.readouterr().out == b"OK LIC-0001\nnameAlicecityBerlinnameBobcityKiel\x04"


def test_extract_missing_capture(tmp_path, capsys):
    missing = tmp_path / "missing.hyc"
    rc = main(["extract", "--capture", str(missing), "--spec", str(SPEC_PATH)])
    assert rc == 1
    assert str(missing) in capsys.readouterr().err


def test_extract_corrupt_capture(tmp_path, capsys):
    bad = tmp_path / "bad.hyc"
    bad.write_bytes(b"XXXX" + bytes(40))
    assert main(["extract", "--capture", str(bad), "--spec", str(SPEC_PATH)]) == 1
    assert "BadMagic" in capsys.readouterr().err


def test_sniff_golden(golden_file, capsys):
    assert main(["sniff", "--capture", str(golden_file)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1
    hit = json.loads(lines[0])
    assert hit["username"] == "demo" and hit["seq"] == 0
    assert "secret" not in hit
    assert main(["sniff", "--capture", str(golden_file), "--show-secrets"]) == 0
    assert json.loads(capsys.readouterr().out)["secret"] == "demo-pass"


def test_export(golden_file, capsys):
    assert main(["export", "--capture", str(golden_file)]) == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [r["dir"] for r in rows] == ["c2s", "s2c", "c2s", "s2c"]
    assert bytes.fromhex(rows[2]["payload_hex"]) == b"GET contacts\n"


@pytest.mark.parametrize("argv", [
    [], ["frobnicate"], ["extract"], ["extract", "--capture", "x", "--spec", "y", "--direction", "up"],
    ["sniff", "--capture", "x", "--bogus"], ["script"], ["script", "mark", "--script", "f", "--step", "x",
                                                         "--range", "1:2", "--name", "n"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("sub", ["proxy", "sniff", "extract", "export", "script", "replay", "mock-serve", "mock-client"])
def test_help_everywhere(sub, capsys):
    assert main([sub, "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_script_build_mark_replay(golden_file, tmp_path, mock_server, capsys):
    script = tmp_path / "golden.script"
    assert main(["script", "build", "--capture", str(golden_file), "--out", str(script)]) == 0
    assert main(["script", "mark", "--script", str(script), "--step", "0", "--range", "5:9", "--name", "user"]) == 0
    assert "placeholder 0 5 9 user" in script.read_text()

    assert main(["replay", "--script", str(script), "--server", mock_server.address]) == 1
    assert "UnboundPlaceholder" in capsys.readouterr().err

    out = tmp_path / "replayed.hyc"
    assert main(["replay", "--script", str(script), "--server", mock_server.address,
                 "--bind-str", "user=demo", "--capture-out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["timed_out_steps"] == []
    replayed = capture.read_capture(out)
    original = capture.read_capture(golden_file)
    assert capture.concat_raw(replayed, 1) == capture.concat_raw(original, 1)

    assert main(["replay", "--script", str(script), "--server", mock_server.address,
                 "--bind", "user=" + b"eve".hex(), "--capture-out", str(out)]) == 0
    assert capture.concat_raw(capture.read_capture(out), 1).data == b"ERR auth\nERR auth\n"


def test_script_mark_bad_range(golden_file, tmp_path, capsys):
    script = tmp_path / "s.script"
    main(["script", "build", "--capture", str(golden_file), "--out", str(script)])
    assert main(["script", "mark", "--script", str(script), "--step", "0", "--range", "5-9", "--name", "u"]) == 2
    assert main(["script", "mark", "--script", str(script), "--step", "0", "--range", "5:99", "--name", "u"]) == 1
    assert "RangeOutOfBounds" in capsys.readouterr().err


def test_bind_parsing_errors(golden_file, tmp_path, mock_server):
    script = tmp_path / "s.script"
    main(["script", "build", "--capture", str(golden_file), "--out", str(script)])
    base = ["replay", "--script", str(script), "--server", mock_server.address]
    assert main(base + ["--bind", "novalue"]) == 2
    assert main(base + ["--bind", "u=zz"]) == 2
    assert main(base + ["--bind", "u=00", "--bind-str", "u=x"]) == 2


def test_mock_client_direct(mock_server, capsys):
    assert main(["mock-client", "--server", mock_server.address, "--script", str(FIXTURES / "client.script")]) == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert bytes.fromhex(rows[0]["received_hex"]) == b"OK LIC-0001\n"


def test_mock_client_unreachable(capsys):
    rc = main(["mock-client", "--server", f"127.0.0.1:{free_port()}", "--script", str(FIXTURES / "client.script")])
    assert rc == 1


def _spawn(*args):
    return subprocess.Popen([sys.executable, "-m", "tapwire.cli", *args],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE)


def _wait_listening(port, timeout=10):
    import socket
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return
        except OSError:
            time.sleep(0.05)
    raise TimeoutError(port)


def test_proxy_subprocess_pipeline(tmp_path):
    """proxy + mock-serve as processes, then extract; same bytes as in-process."""
    mock_port, proxy_port = free_port(), free_port()
    cap_dir = tmp_path / "caps"
    cap_dir.mkdir()
    server = _spawn("mock-serve", "--listen", f"127.0.0.1:{mock_port}")
    px = None
    try:
        _wait_listening(mock_port)
        px = _spawn("proxy", "--listen", f"127.0.0.1:{proxy_port}", "--upstream", f"127.0.0.1:{mock_port}",
                    "--capture-dir", str(cap_dir))
        # the readiness probe is itself a (empty) proxied session
        _wait_listening(proxy_port)
        rc = subprocess.run([sys.executable, "-m", "tapwire.cli", "mock-client", "--server", f"127.0.0.1:{proxy_port}",
                             "--script", str(FIXTURES / "client.script")], capture_output=True).returncode
        assert rc == 0
        time.sleep(0.5)
    finally:
        for p in (px, server):
            if p is not None:
                p.send_signal(signal.SIGINT)
        outs = [p.communicate(timeout=10) for p in (px, server) if p is not None]
    assert px.returncode == 0 and server.returncode == 0
    summaries = [json.loads(l) for l in outs[0][0].decode().splitlines()]
    full = [s for s in summaries if s["c2s_bytes"]]
    assert len(full) == 1 and full[0]["hits"] == [{"seq": 0, "username": "demo"}]
    cap = cap_dir / (full[0]["session_id"] + ".hyc")

    out = tmp_path / "out.xml"
    assert main(["extract", "--capture", str(cap), "--spec", str(SPEC_PATH), "--out", str(out)]) == 0
    session = capture.read_capture(cap)
    in_process = cleanse.to_xml(cleanse.build_structure(
        capture.concat_raw(session, capture.Direction.SERVER_TO_CLIENT), cleanse.load_spec(SPEC_PATH)))
    assert out.read_bytes() == in_process == (FIXTURES / "golden.xml").read_bytes()


def test_proxy_bad_config(tmp_path, capsys):
    assert main(["proxy", "--listen", "127.0.0.1:5000", "--upstream", "127.0.0.1:5000",
                 "--capture-dir", str(tmp_path)]) == 2
