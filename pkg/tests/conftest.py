import numpy as np
import pytest

from jointkd import tensor as T
from jointkd.tensor import Tensor


def numeric_grad(fn, arrays, step=1e-6):
    """Central differences of scalar ``fn()`` w.r.t. every element of ``arrays`` (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + step
            up = fn()
            a[i] = old - step
            down = fn()
            a[i] = old
            g[i] = (up - down) / (2 * step)
        out.append(g)
    return out


def analytic_grad(build, leaves):
    for t in leaves:
        t.zero_grad()
    with T.Tape() as tape:
        loss = build()
    T.backward(loss, tape)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]


def assert_grads_match(build, leaves, rtol=1e-6, atol=1e-8):
    ana = analytic_grad(build, leaves)
    num = numeric_grad(lambda: build().item(), [t.data for t in leaves])
    for a, n in zip(ana, num):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape, name=None):
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


# ------------------------------------------------------------ acceptance summary

CRITERIA = {}


def record_criterion(number, ok, detail):
    CRITERIA[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
