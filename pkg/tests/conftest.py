import pytest

from hopcoal import make_kernels

BASE = dict(dim=1, torus_len=20.0, q1=1.0, sigma1=0.8, q2=1.0, sigma2=0.8, a1=0.5, w1=0.8, a2=0.5, w2=0.8)

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def kernel_params(**changes):
    p = dict(BASE)
    p.update(changes)
    return p


@pytest.fixture
def ks():
    return make_kernels(BASE)


@pytest.fixture
def ks_plain():
    """Kernels without repulsion."""
    return make_kernels(kernel_params(a1=0.0, a2=0.0))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
