import numpy as np
import pytest

from freedom.autodiff import numerical_gradient
from freedom.model import ModelParams, ModelShape

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / scale)


def fd_errors(loss_fn, params, h=1e-5) -> list[float]:
    """Relative error between backprop and central differences, per tensor.

    ``loss_fn`` must be deterministic (fixed noise) and rebuild its graph on
    every call.
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    return [rel_error(g, numerical_gradient(lambda: float(loss_fn()), p, h))
            for p, g in zip(params, analytic)]


def grl_fd_errors(m, loss_fn, helper_fn, params=None, h=1e-5):
    """FD oracle for a loss containing the reversed style helper: the helper's
    numerical gradient enters with a flipped sign for style-encoder tensors."""
    params = m.trainable() if params is None else params
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    style_ids = {id(p) for p in m.style_encoder.parameters()}
    errs = []
    for p in params:
        rest = numerical_gradient(lambda: float(loss_fn()) - float(helper_fn()), p, h)
        helper = numerical_gradient(lambda: float(helper_fn()), p, h)
        sign = -1.0 if id(p) in style_ids else 1.0
        errs.append(rel_error(p.grad, rest + sign * helper))
    return errs


def tiny_shape(**kw) -> ModelShape:
    base = dict(input_dim=5, class_dim=3, style_dim=3, n_classes=3, hidden=6)
    base.update(kw)
    return ModelShape(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model(rng):
    return ModelParams.init(tiny_shape(), rng)
