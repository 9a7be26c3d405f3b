import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

from adept.hsm import init_hsm  # noqa: E402
from adept.model import ModelConfig, init_model  # noqa: E402


@pytest.fixture(scope="session")
def tiny_model():
    return init_model(ModelConfig(n_layers=4, d_hidden=16, d_qkv=16, n_heads=2, max_seq=32), seed=3)


@pytest.fixture(scope="session")
def tiny_hsm():
    return init_hsm(16, seed=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary so it
# survives output capture
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def verdict():
    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"C{number:02d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
