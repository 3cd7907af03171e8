import numpy as np
import pytest

from fedmn import tensor as T


def numeric_grad(f, array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``array`` (mutated in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = array[i]
        array[i] = orig + step
        hi = f()
        array[i] = orig - step
        lo = f()
        array[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def check_param_grads(loss_fn, params, step=1e-5):
    """Largest relative error between analytic and numeric gradients over ``params``."""
    T.zero_grad(params)
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        numeric = numeric_grad(lambda: loss_fn().item(), p.data, step)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
