import numpy as np
import pytest
from scipy.spatial.transform import Rotation


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_rotation(rng, n=None):
    """Uniform rotation matrices (scipy oracle, independent of gplio.so3)."""
    rot = Rotation.random(n, random_state=rng)
    return rot.as_matrix()


def numeric_jacobian(f, x, eps=1e-6):
    """Central differences of a vector function of a flat vector."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    jac = np.zeros(f0.shape + x.shape)
    for i in range(x.size):
        d = np.zeros_like(x)
        d[i] = eps
        jac[..., i] = (np.asarray(f(x + d)) - np.asarray(f(x - d))) / (2 * eps)
    return jac


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b).max() / max(np.abs(b).max(), floor)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts at the end of the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines.items()):
            terminalreporter.write_line(line)
