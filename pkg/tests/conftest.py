import numpy as np
import pytest

from beamtrl.geometry import PointCloud
from beamtrl.simenv import EnvSpec, generate_environment


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def brute_chamfer(P, Q):
    """Direct double loop over both clouds."""
    def one_way(a, b):
        total = 0.0
        for p in a:
            best = min((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 for q in b)
            total += best
        return total / len(a)

    p, q = P.points.tolist(), Q.points.tolist()
    return one_way(p, q) + one_way(q, p)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_env():
    return generate_environment(EnvSpec(n_train_locations=40, n_test_locations=30, seed=3))


def cloud(*pts, label=""):
    return PointCloud(np.array(pts, dtype=float).reshape(-1, 2), label)
