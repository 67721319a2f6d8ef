import numpy as np
import pytest
from hypothesis import strategies as st

from qswitch import SwitchTopology, make_arrivals
from qswitch.scenarios import fig2a_config


@pytest.fixture(scope="session")
def fig2a():
    cfg = fig2a_config()
    return cfg.topology, cfg.arrivals


@pytest.fixture(scope="session")
def single_link():
    """One link, one type, B = 1, link arrivals Bernoulli(0.5), decoherence 0.5."""
    top = SwitchTopology(request_links=((0,),), num_links=1, gamma=(1.0,), buffer=1, decoherence=(0.5,))
    return top, make_arrivals([0.0], [0.5])


def random_small(rng: np.random.Generator, max_buffer=2, max_links=3, max_types=3):
    """Random switch with B <= 2 and L <= 3; every link is used by some type."""
    L = int(rng.integers(1, max_links + 1))
    R = int(rng.integers(1, max_types + 1))
    links = []
    for r in range(R):
        k = int(rng.integers(1, L + 1))
        links.append(tuple(sorted(rng.choice(L, size=k, replace=False).tolist())))
    B = int(rng.integers(1, max_buffer + 1))
    top = SwitchTopology(
        request_links=tuple(links),
        num_links=L,
        gamma=tuple(rng.uniform(0.2, 1.0, R).round(3)),
        buffer=B,
        decoherence=tuple(rng.uniform(0.05, 0.95, L).round(3)),
    )
    arr = make_arrivals(rng.uniform(0.0, 0.3, R).round(3), rng.uniform(0.1, 0.9, L).round(3))
    return top, arr


@st.composite
def small_switches(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_small(np.random.default_rng(seed))


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): numbered acceptance criterion")


ACCEPTANCE_LINES = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    for key, value in report.user_properties:
        if key == "criterion":
            ACCEPTANCE_LINES.append((value, "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for title, verdict in sorted(ACCEPTANCE_LINES, key=lambda x: int(x[0].split(".")[0])):
        terminalreporter.write_line(f"{verdict}  {title}")
