import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from vflossy.dictionary import BuildConfig, DictionaryStore

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# built dictionaries are cached here across runs; delete the directory to rebuild
CACHE_DIR = Path(os.environ.get("VFLOSSY_TEST_CACHE", Path.home() / ".cache" / "vflossy-tests"))

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def store():
    return DictionaryStore(CACHE_DIR, BuildConfig())


@pytest.fixture(scope="session")
def acceptance():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:2d}. {msg}")
