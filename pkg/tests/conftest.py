import numpy as np
import pytest

from objvid.config import TrainConfig
from objvid.dataset import make_split


def tiny_config(**kw) -> TrainConfig:
    base = dict(frames=4, num_slots=2, dim=16, heads=2, patch=8, batch_size=4, epochs=2, seed=0,
                eval_every=0, min_per_class=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_manifest():
    # 3 classes x 4 clips, 32 px canvas: 9 train / 3 val
    return make_split(12, 3, seed=0, frames=4, canvas=32)


@pytest.fixture
def rng():
    return np.random.default_rng(6)


# ----------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion, repeated in the terminal summary

ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, passed: bool, detail: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
