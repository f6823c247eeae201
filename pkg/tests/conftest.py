import numpy as np
import pytest

from actsel import nn


def finite_difference_grad(loss_fn, params, h=1e-5):
    """Central differences of ``loss_fn(params)`` w.r.t. every parameter."""
    flat = params.flat()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (loss_fn(params.unflatten(up)) - loss_fn(params.unflatten(down))) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-7):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def random_net_case(rng, kind):
    """A small random network plus a batch for the given loss kind."""
    d = int(rng.integers(2, 6))
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=rng.integers(0, 3)))
    act = ["tanh", "relu"][int(rng.integers(0, 2))]
    n = int(rng.integers(2, 7))
    x = rng.normal(size=(n, d))
    if kind == "xent":
        k = int(rng.integers(2, 5))
        params = nn.init_params(nn.ModelSpec((d,) + hidden, act, "classifier", k), rng)
        params = params.replace([a + 0.1 * rng.normal(size=a.shape) for a in params.arrays()])
        y = rng.integers(0, k, size=n)
    else:
        e = int(rng.integers(2, 5))
        d2 = int(rng.integers(2, 6))
        params = nn.init_two_tower(nn.ModelSpec((d,) + hidden, act, "encoder", e),
                                   nn.ModelSpec((d2,), act, "encoder", e), rng)
        params = params.replace([a + 0.1 * rng.normal(size=a.shape) for a in params.arrays()])
        y = rng.normal(size=(n, d2))
    return params, x, y


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}
# informational lines logged next to the gate but not gating it
ACCEPTANCE_INFO: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    for line in ACCEPTANCE_INFO:
        terminalreporter.write_line(f"info: {line}")
