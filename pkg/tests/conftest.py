import numpy as np
import pytest

from amal import nncore


def central_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` over every entry of ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def random_net(rng: np.random.Generator, max_layers: int = 3, max_units: int = 16, activation=None):
    depth = int(rng.integers(1, max_layers + 1))
    dims = [int(rng.integers(1, max_units + 1)) for _ in range(depth + 1)]
    dims[-1] = max(dims[-1], 2)
    act = activation or ("tanh" if rng.random() < 0.5 else "relu")
    params = nncore.init_mlp(dims, rng, act)
    for b in params.biases:
        b[...] = rng.normal(scale=0.1, size=b.shape)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, repeated in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
