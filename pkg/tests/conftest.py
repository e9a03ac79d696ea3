import numpy as np
import pytest

from sgmcmc.logistic import LogisticModel, simulate_logreg


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_logistic():
    data, _ = simulate_logreg(8, 3, 0.4, rng=np.random.default_rng(7))
    return LogisticModel.from_dataset(data)


@pytest.fixture
def logistic_100():
    data, _ = simulate_logreg(100, 3, 0.4, rng=np.random.default_rng(8))
    return LogisticModel.from_dataset(data)


def fd_grad(f, x, eps=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = eps
        g[j] = (f(x + e) - f(x - e)) / (2 * eps)
    return g


# one PASS/FAIL line per acceptance criterion in the terminal summary
ACCEPTANCE = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None and (rep.when == "call" or rep.failed):
        detail = dict(item.user_properties).get("detail", "")
        ok, parts, _ = ACCEPTANCE.get(mark.args[0], (True, [], ""))
        if detail and detail not in parts:
            parts = parts + [detail]
        ACCEPTANCE[mark.args[0]] = (ok and rep.passed, parts, mark.args[1])
    return rep


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, parts, title = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {k:>2}. {title}: {'; '.join(parts)}")
