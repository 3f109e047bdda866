import pytest
import torch

from attnlab.numcore import DTYPE


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(42)


def randn(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=DTYPE)


@pytest.fixture
def qkv42():
    """The seed-42 L=8, d=4 instance used throughout the attention examples."""
    gen = torch.Generator().manual_seed(42)
    return randn(gen, 8, 4), randn(gen, 8, 4), randn(gen, 8, 4)


# One line per acceptance criterion, printed after the run whatever the outcome.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
