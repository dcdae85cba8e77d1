import numpy as np
import pytest

from ptmwrn import autograd


@pytest.fixture(autouse=True)
def checked_mode():
    autograd.set_check_finite(True)
    yield
    autograd.set_check_finite(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(arr, requires_grad=False):
    return autograd.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[number])
