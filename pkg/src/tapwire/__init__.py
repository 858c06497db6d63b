"""Capture, sniff, replay and cleanse plaintext TCP traffic of legacy client/server systems."""

from importlib import resources

__version__ = "0.1.0"


def shipped_spec_path():
    """Path of the bundled HDP/0 delimiter rules."""
    return resources.files(__name__) / "data" / "hdp0.rules"
