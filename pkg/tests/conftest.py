import numpy as np
import pytest

from cagan.core import Tensor


def numeric_grad(f, arrays, i, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        k = it.multi_index
        old = x[k]
        x[k] = old + h
        up = f(*arrays)
        x[k] = old - h
        down = f(*arrays)
        x[k] = old
        g[k] = (up - down) / (2 * h)
    return g


def gradcheck(build, *arrays, h=1e-5, seed=0):
    """Compare backward() against central differences for ``sum(build(*tensors) * R)``.

    Returns the largest relative error (L2 norm of the difference over the
    larger of the two gradient norms) across all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = np.random.default_rng(seed)
    out_shape = build(*[Tensor(a) for a in arrays]).shape
    R = probe.normal(size=out_shape)

    def scalar(*arrs):
        return float((build(*[Tensor(a) for a in arrs]).data * R).sum())

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    (out * R).sum().backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays, i, h)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
        worst = max(worst, np.linalg.norm(num - ana) / scale)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report ---------------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
