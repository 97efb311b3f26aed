import json
import struct
import sys
from pathlib import Path

import numpy as np
import pytest

TESTS = Path(__file__).parent
MOCK_HOOK = TESTS / "mock_hook.py"


def raw_file(path, header, data=b""):
    """Write a checkpoint byte-for-byte from a header dict, bypassing the writer."""
    blob = json.dumps(header).encode()
    Path(path).write_bytes(struct.pack("<Q", len(blob)) + blob + data)
    return Path(path)


def hook_cmd(*args):
    """Command template running the mock trainer hook with this interpreter."""
    return " ".join([sys.executable, str(MOCK_HOOK), *args])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _pinned_clock(monkeypatch):
    # manifest sidecars carry a creation time; pin it so reruns are byte-identical
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
