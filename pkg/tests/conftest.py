import os
import pathlib
import socket
import sys
import threading
import time

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from tapwire import capture, cleanse, mock, proxy  # noqa: E402

FIXTURES = pathlib.Path(__file__).parent / "fixtures"
SPEC_PATH = pathlib.Path(cleanse.__file__).parent / "data" / "hdp0.rules"

GOLDEN_SESSION_ID = bytes.fromhex("00112233445566778899aabbccddeeff")
GOLDEN_OPENED_US = 1_700_000_000_000_000
GET_CONTACTS_REPLY = (b"\x02\x1fname\x1eAlice\x1fcity\x1eBerlin\x03"
                      b"\x02\x1fname\x1eBob\x1fcity\x1eKiel\x03\x04")
GOLDEN_TRANSCRIPT = [
    (b"AUTH demo demo-pass\n", b"OK LIC-0001\n"),
    (b"GET contacts\n", GET_CONTACTS_REPLY),
]


def read_hex_fixture(name):
    lines = (FIXTURES / name).read_text().splitlines()
    return bytes.fromhex("".join(l for l in lines if not l.startswith("#")))


def golden_expected_session():
    P, D = capture.Packet, capture.Direction
    return capture.Session(GOLDEN_SESSION_ID, GOLDEN_OPENED_US, (
        P(0, GOLDEN_OPENED_US + 1000, D.CLIENT_TO_SERVER, b"AUTH demo demo-pass\n"),
        P(1, GOLDEN_OPENED_US + 2000, D.SERVER_TO_CLIENT, b"OK LIC-0001\n"),
        P(2, GOLDEN_OPENED_US + 3000, D.CLIENT_TO_SERVER, b"GET contacts\n"),
        P(3, GOLDEN_OPENED_US + 4000, D.SERVER_TO_CLIENT, GET_CONTACTS_REPLY),
    ))


@pytest.fixture
def golden_bytes():
    return read_hex_fixture("golden_session.hex")


@pytest.fixture
def golden_session():
    return golden_expected_session()


@pytest.fixture(scope="session")
def hdp0_spec():
    return cleanse.load_spec(SPEC_PATH)


@pytest.fixture
def mock_server():
    with mock.MockServer("127.0.0.1:0") as server:
        yield server


class ProxyHarness:
    def __init__(self, upstream, capture_dir, **kwargs):
        self.summaries = []
        self._cond = threading.Condition()
        config = proxy.ProxyConfig("127.0.0.1:0", upstream, str(capture_dir), **kwargs)
        self.proxy = proxy.CaptureProxy(config, on_summary=self._on_summary)

    def _on_summary(self, summary):
        with self._cond:
            self.summaries.append(summary)
            self._cond.notify_all()

    @property
    def address(self):
        return self.proxy.address

    def wait_for(self, count, timeout=10.0):
        deadline = time.monotonic() + timeout
        with self._cond:
            while len(self.summaries) < count:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TimeoutError(f"only {len(self.summaries)} of {count} sessions finished")
                self._cond.wait(left)
            return list(self.summaries)


@pytest.fixture
def make_proxy(tmp_path):
    started = []

    def factory(upstream, capture_dir=None, **kwargs):
        capture_dir = capture_dir or tmp_path / "captures"
        os.makedirs(capture_dir, exist_ok=True)
        harness = ProxyHarness(upstream, capture_dir, **kwargs)
        harness.proxy.start()
        started.append(harness)
        return harness

    yield factory
    for h in started:
        h.proxy.shutdown()


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]
