import numpy as np
import pytest

from odeunlearn.numkit import make_rng
from odeunlearn.vecfield import FieldParams


def random_field(rng, dim, hidden, scale=0.5):
    return FieldParams(
        scale * rng.standard_normal((hidden, dim + 1)),
        scale * rng.standard_normal(hidden),
        scale * rng.standard_normal((dim, hidden)),
        scale * rng.standard_normal(dim),
    )


def central_diff(fun, x, eps=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (fun(xp) - fun(xm)) / (2 * eps)
    return g


def rel_err(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


@pytest.fixture
def rng():
    return make_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
