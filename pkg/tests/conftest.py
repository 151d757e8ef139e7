"""Shared oracles and helpers for the test suite."""

import numpy as np
import pytest

from ssnt import tensor as T


def finite_difference_grads(build_loss, params, eps=1e-5):
    """Central-difference gradients of a scalar loss for every parameter.

    ``build_loss`` must rebuild the forward computation from the current
    parameter values each call; it is evaluated without a tape.
    """
    grads = {}
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = build_loss().item()
            flat[k] = orig - eps
            down = build_loss().item()
            flat[k] = orig
            gflat[k] = (up - down) / (2.0 * eps)
        grads[p.name] = g
    return grads


def autodiff_grads(build_loss, params):
    """Backward-pass gradients, cleared before accumulation."""
    for p in params:
        p.grad[...] = 0.0
    with T.Tape() as tape:
        loss = build_loss()
    T.backward(tape, loss)
    return {p.name: p.grad.copy() for p in params}


def assert_grads_close(ad, fd, rel_tol=1e-4):
    """Per-tensor relative error between autodiff and finite differences."""
    for name, a in ad.items():
        f = fd[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(f), 1e-8)
        err = np.linalg.norm(a - f) / denom
        assert err <= rel_tol, f"gradient mismatch for {name}: rel err {err:.3e}"


def gradcheck(build_loss, params, eps=1e-5, rel_tol=1e-4):
    ad = autodiff_grads(build_loss, params)
    fd = finite_difference_grads(build_loss, params, eps=eps)
    assert_grads_close(ad, fd, rel_tol=rel_tol)


@pytest.fixture
def rng():
    return T.RngState(12345)
