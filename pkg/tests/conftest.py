import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("xmpt", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("xmpt")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d=16):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
