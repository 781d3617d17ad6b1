import numpy as np
import pytest

from flexattn.tensor import GradTape, Matrix, backward, mul, sum_all


def projected_loss(out: Matrix, r: np.ndarray) -> Matrix:
    """Scalar <out, r>, so every output entry gets its own random weight."""
    return sum_all(mul(out, Matrix(r)))


def rel_err(a, n) -> float:
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_grads(fn, inputs, h=1e-6):
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a list of Matrices to a 1x1 Matrix.
    """
    with GradTape() as tape:
        tape.watch(*inputs)
        out = fn(inputs)
    g = backward(tape, out)
    worst = 0.0
    for k, x in enumerate(inputs):
        analytic = g.get(x)
        analytic = np.zeros_like(x.data) if analytic is None else analytic
        numeric = np.zeros_like(x.data)
        base = x.data
        for idx in np.ndindex(base.shape):
            vals = []
            for s in (h, -h):
                arr = base.copy()
                arr[idx] += s
                args = list(inputs)
                args[k] = Matrix(arr)
                vals.append(float(fn(args).data[0, 0]))
            numeric[idx] = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'}  {name:<28} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
