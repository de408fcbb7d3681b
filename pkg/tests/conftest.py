import numpy as np
import pytest

from sasrec import model as model_mod

# every forward pass in the suite verifies the attention mask invariant
model_mod.CHECK_ATTENTION = True


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    from sasrec import tensor as T

    with T.precision("float64"):
        yield


@pytest.fixture(scope="session")
def small_split():
    """200 users on a 40-item planted chain; shared by the cheap end-to-end tests."""
    from sasrec.data import five_core_filter, split_leave_one_out
    from sasrec.synthetic import planted_markov

    inter, _ = planted_markov(200, 40, 20, seed=3)
    return split_leave_one_out(five_core_filter(inter))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
