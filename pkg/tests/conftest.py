import numpy as np
import pytest

from fingercascade import geometry as geo
from fingercascade.datagen import LabeledFrame


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or acceptance runs")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_frame(w=64, h=48, box=(20, 10, 40, 30), tip=(22, 12), joint=(30, 20), seed=0):
    img = np.random.default_rng(seed).uniform(0, 1, (h, w, 3)).astype(np.float32)
    return LabeledFrame(img, geo.BBox(*map(float, box)), geo.Point(*map(float, tip)),
                        geo.Point(*map(float, joint)), {})


# one PASS/FAIL line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
