import json
import struct

import numpy as np
import pytest

from elves.model_store import load_model, write_arrays


def raw_model_bytes(header: dict, data: bytes = b"") -> bytes:
    """A model file assembled by hand, bypassing the library writer."""
    raw = json.dumps(header).encode()
    return struct.pack("<Q", len(raw)) + raw + data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_model(tmp_path):
    """Write ``{name: array}`` to a model file and return its path."""
    counter = iter(range(10**6))

    def make(arrays, name=None, directory=None, metadata=None):
        d = directory or tmp_path
        d.mkdir(parents=True, exist_ok=True)
        path = d / (name or f"m{next(counter)}.safetensors")
        write_arrays(path, arrays, metadata)
        return path

    return make


@pytest.fixture
def open_models():
    opened = []

    def open_(paths):
        ms = [load_model(p) for p in paths]
        opened.extend(ms)
        return ms

    yield open_
    for m in opened:
        m.close()


# --- acceptance reporting ------------------------------------------------------
# Tests in test_acceptance.py attach a one-line "detail" via record_property;
# a summary section lists PASS/FAIL per criterion at the end of the run.

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        name = report.nodeid.split("::")[-1]
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _ACCEPTANCE[name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[name]
        num = name.split("_")[1].lstrip("c")
        terminalreporter.write_line(f"criterion {int(num):>2}: {status}  {detail}")
