import numpy as np
import pytest

from nvsplit.vecfield import VectorField, tensor_apply

_CRITERIA = []


def quadratic_field(rng, n, scale=1.0, with_hess=True, label="q"):
    """V(x) = c + A x + Q(x, x)/2 with Q symmetric in its last two indices."""
    c = scale * rng.normal(size=n)
    A = scale * rng.normal(size=(n, n))
    Q = scale * rng.normal(size=(n, n, n))
    Q = 0.5 * (Q + np.swapaxes(Q, 1, 2))

    def ev(x):
        return c + x @ A.T + 0.5 * np.einsum("ikl,...k,...l->...i", Q, x, x)

    def jac(x):
        return A + tensor_apply(np.broadcast_to(Q, x.shape[:-1] + Q.shape), x)

    def hess(x):
        return np.broadcast_to(Q, x.shape[:-1] + Q.shape)

    return VectorField(n, ev, jac=jac, hess=hess if with_hess else None, label=label)


@pytest.fixture
def rng():
    return np.random.default_rng(20261017)


@pytest.fixture
def criterion():
    """Record a one-line verdict for the acceptance summary."""

    def record(number, name, passed, detail):
        _CRITERIA.append((number, name, passed, detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {name}: {detail}")
