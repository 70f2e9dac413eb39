import numpy as np
import pytest

from semvc.codec_env import CtuModel, FrameModel, VideoModel, gen_model
from semvc.mode_space import ModeSpace


def make_model(ctus_per_frame, gop_size=4, grid=None, intra_factor=1.5, prop_decay=0.3):
    """Model from nested ``(c, kappa, S, mu, tau)`` tuples, one list per frame."""
    frames = tuple(
        FrameModel(ctus=tuple(CtuModel(*p) for p in ctus), is_intra=(t == 0))
        for t, ctus in enumerate(ctus_per_frame)
    )
    if grid is None:
        grid = (1, len(ctus_per_frame[0]))
    return VideoModel(frames, gop_size, grid, intra_factor, prop_decay)


def uniform_model(frames=4, n=4, c=1000.0, kappa=1.0, s=0.5, mu=32.0, tau=3.0, **kw):
    return make_model([[(c, kappa, s, mu, tau)] * n for _ in range(frames)], grid=(1, n), **kw)


@pytest.fixture(scope="session")
def default_space():
    return ModeSpace()


@pytest.fixture(scope="session")
def default_model():
    return gen_model(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
