import numpy as np
import pytest

from gliomamil import autodiff as ad
from gliomamil.who import MarkerLabels


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f(x)``; independent of the engine's own checker."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(a, n, floor: float = 1e-5) -> float:
    a, n = np.asarray(a), np.asarray(n)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


def autodiff_grad(build, x: np.ndarray) -> np.ndarray:
    t = ad.Tensor(x, requires_grad=True)
    grads = ad.backward(build(t))
    return grads[t]


def scalar_of(build):
    def f(x):
        with ad.no_grad():
            return build(ad.Tensor(x)).item()

    return f


@pytest.fixture
def labels_gbm():
    return MarkerLabels.from_markers(0, 0, 1, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
