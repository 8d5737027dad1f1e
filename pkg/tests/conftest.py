import sys

import numpy as np
import pytest

from kaprompt import kernels
from kaprompt.numerics import GradientTape, Tensor

FD_STEP = 1e-5
REL_TOL = 1e-4
# below this magnitude a gradient is compared absolutely (REL_TOL * floor = 1e-7)
MAGNITUDE_FLOOR = 1e-3


def fd_errors(fn, arrays, n_points=20, seed=0, wrt=None):
    """Analytic vs central-difference gradients of scalar ``fn(*tensors)``.

    Checks ``n_points`` random coordinates of each input listed in ``wrt``
    (default: all). Returns the max of |a - n| / max(|a|, |n|, floor) per input.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with GradientTape() as tape:
        loss = fn(*tensors)
    grads = tape.gradient(loss, [tensors[i] for i in wrt])

    def value(arrs):
        return float(fn(*[Tensor(a) for a in arrs]).item())

    errors = []
    for i, g in zip(wrt, grads):
        worst = 0.0
        for _ in range(n_points):
            idx = tuple(int(rng.integers(0, s)) for s in arrays[i].shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += FD_STEP
            minus[i][idx] -= FD_STEP
            numeric = (value(plus) - value(minus)) / (2 * FD_STEP)
            analytic = float(g[idx])
            denom = max(abs(analytic), abs(numeric), MAGNITUDE_FLOOR)
            worst = max(worst, abs(analytic - numeric) / denom)
        errors.append(worst)
    return errors


def assert_gradients(fn, arrays, n_points=20, seed=0, wrt=None):
    errs = fd_errors(fn, arrays, n_points=n_points, seed=seed, wrt=wrt)
    assert max(errs) <= REL_TOL, f"finite-difference mismatch: {errs}"
    return errs


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    previous = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (passed, detail) in module.RESULTS.items():
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
