import numpy as np
import pytest

from bipose import autograd as ag
from bipose.autograd import Tensor
from bipose.layers import Conv2d


def pin_alpha(module):
    """Freeze every binary conv's scale at its current value (alpha is a constant in the backward)."""
    for m in module.modules():
        if isinstance(m, Conv2d) and m.binary:
            m.alpha_override = m.scale_factors().copy()
    return module


def numeric_grad(f, arr, idx, h=1e-4):
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck_module(module, inputs, n_slices=5, seed=0, h=1e-4, smooth=True, as_list=False):
    """Compare backward against central differences on random entries of every parameter and input.

    The module is evaluated on a fixed random projection of its output so the
    check covers the full Jacobian-vector product.  Returns the worst relative
    error and how many entries were checked.
    """
    rng = np.random.default_rng(seed)
    module.astype(np.float64)
    pin_alpha(module)
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]
    proj = None

    def out_value():
        ts = [Tensor(x) for x in xs]
        with ag.smooth_binarizer() if smooth else _null():
            y = module(ts) if as_list else module(*ts)
        ys = y if isinstance(y, list) else [y]
        return ys

    def loss_value():
        ys = out_value()
        return float(sum((yy.data * p).sum() for yy, p in zip(ys, proj)))

    ys = out_value()
    proj = [rng.standard_normal(y.shape) for y in ys]

    ts = [Tensor(x, requires_grad=True) for x in xs]
    module.zero_grad()
    with ag.smooth_binarizer() if smooth else _null():
        y = module(ts) if as_list else module(*ts)
    ys = y if isinstance(y, list) else [y]
    loss = None
    for yy, p in zip(ys, proj):
        term = ag.sum(ag.mul(yy, p))
        loss = term if loss is None else ag.add(loss, term)
    ag.backward(loss)

    worst, checked = 0.0, 0
    targets = [(p.data, p.grad, name) for name, p in module.named_parameters()]
    targets += [(x, t.grad, f"input{i}") for i, (x, t) in enumerate(zip(xs, ts))]
    for arr, grad, name in targets:
        assert grad is not None, f"no gradient reached {name}"
        for _ in range(n_slices):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            num = numeric_grad(loss_value, arr, idx, h)
            worst = max(worst, rel_err(grad[idx], num))
            checked += 1
    return worst, checked


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *a):
        return False


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdicts (one line per criterion) after the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("[", 1)[1].split("]", 1)[0])):
            terminalreporter.write_line(line)
