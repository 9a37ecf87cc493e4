import numpy as np
import pytest

from bnf2bnf.numerics import DetachReplay, Tape, Tensor, backward, finite_difference_gradient, max_relative_error

GRAD_TOL = 1e-4

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def check_gradients(loss_fn, params, eps=1e-5, tol=GRAD_TOL):
    """Backward-pass gradients of ``loss_fn`` vs central differences; returns worst relative error.

    Stop-gradient outputs are held at their reference values while differencing.
    """
    for p in params:
        p.zero_grad()
    with DetachReplay() as replay:
        with Tape() as tape:
            loss = loss_fn()
        backward(loss, tape)

        def f():
            replay.rewind()
            return loss_fn().item()

        numeric = finite_difference_gradient(f, params, eps)
    analytic = [p.grad.copy() for p in params]
    worst = max(max_relative_error(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"max relative error {worst:.3e}"
    return worst


def param(rng, *shape, scale=0.5, name=None):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, name=name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_translate(src, spec):
    """Second implementation of the toy translation: recursive on the sentence head,
    rules found by linear scan."""
    if not src:
        return []
    if len(src) >= 2 and any(a == src[0] and b == src[1] for a, b in spec.reorder_pairs):
        return _emit(src[1], spec) + _emit(src[0], spec) + naive_translate(src[2:], spec)
    return _emit(src[0], spec) + naive_translate(src[1:], spec)


def _emit(tok, spec):
    out = [spec.substitution[tok]]
    for k, v in spec.expansions.items():
        if k == tok:
            out.append(v)
    return out


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
