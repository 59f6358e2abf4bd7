import numpy as np
import pytest

from fedprompt.datagen import WorldConfig, generate_scene, generate_world
from fedprompt.numerics import RngStream


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldConfig(d=16, n_classes=4), RngStream(3, "world"))


@pytest.fixture(scope="session")
def small_scenes(small_world):
    stream = RngStream(4, "scenes")
    return [generate_scene(small_world, [0, 1], stream.spawn(i)) for i in range(6)]


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one pass/fail line per criterion, then assert it."""

    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
