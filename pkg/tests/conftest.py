import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mqttauth.jws import Alg, generate_key_pair, hs256_key  # noqa: E402


@pytest.fixture(scope="session")
def keys():
    """One seeded key pair per algorithm (RSA generation is the slow one)."""
    rng = random.Random(1234)
    return {
        Alg.HS256: hs256_key(b"blueberry", "h1"),
        Alg.RS256: generate_key_pair(Alg.RS256, rng, key_id="r1"),
        Alg.ES256: generate_key_pair(Alg.ES256, rng, key_id="e1"),
    }


@pytest.fixture(scope="session")
def other_keys():
    rng = random.Random(4321)
    return {
        Alg.HS256: hs256_key(b"raspberry", "h2"),
        Alg.RS256: generate_key_pair(Alg.RS256, rng, key_id="r2"),
        Alg.ES256: generate_key_pair(Alg.ES256, rng, key_id="e2"),
    }


# -- acceptance reporting --------------------------------------------------

_OUTCOMES = {}


@pytest.fixture
def criterion():
    """``with criterion(n, "text"):`` records one pass/fail line for the summary."""
    import contextlib
    import time

    @contextlib.contextmanager
    def record(number, text):
        start = time.perf_counter()
        try:
            yield
        except BaseException:
            _OUTCOMES[number] = ("FAIL", text, time.perf_counter() - start)
            raise
        _OUTCOMES[number] = ("PASS", text, time.perf_counter() - start)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        status, text, elapsed = _OUTCOMES[number]
        terminalreporter.write_line("%s criterion %2d: %s (%.2fs)" % (status, number, text, elapsed))
