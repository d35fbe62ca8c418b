import numpy as np
import pytest
import torch

from iar.molio import ALL_TEMPLATES, template

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def templates():
    return {name: template(name) for name in ALL_TEMPLATES}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
