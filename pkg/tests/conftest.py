import numpy as np
import pytest

from advmix import data as D
from advmix.generators import ProceduralGlyphDecoder, pad_to_32


@pytest.fixture(scope="session")
def gray_small():
    return D.bundled_mnist("train").take(np.arange(300))


@pytest.fixture(scope="session")
def gray_test_small():
    return D.bundled_mnist("test").take(np.arange(200))


@pytest.fixture
def proc_dec(gray_small):
    return ProceduralGlyphDecoder(pad_to_32(gray_small.images))


def fd_grad(fn, x, h=1e-5):
    """Central finite differences of scalar fn at x (copy-safe)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def max_rel_err(analytic, numeric):
    """Relative error, with near-zero analytic entries compared absolutely."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    small = np.abs(a) < 1e-8
    rel = np.abs(a - n) / np.maximum(np.abs(a), np.abs(n)).clip(1e-300)
    err_small = np.abs(a - n)[small]
    if err_small.size and err_small.max() > 1e-6:
        return np.inf
    return float(rel[~small].max()) if (~small).any() else 0.0


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
