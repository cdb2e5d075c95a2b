"""Shared test helpers: finite-difference oracle and tiny fixtures."""

import numpy as np
import pytest

from bridgeasr import tensor as T


def fd_gradient(f, arrays, eps=1e-3):
    """Central finite differences of scalar f w.r.t. each float64 array.

    Independent of the tape: perturbs raw numpy entries and re-runs f.
    """
    grads = []
    for x in arrays:
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def assert_grad_close(analytic, fd, rtol=1e-4):
    """Max-abs error at most rtol times the gradient scale."""
    analytic = np.asarray(analytic)
    fd = np.asarray(fd)
    scale = max(np.abs(fd).max(), 1e-3)
    err = np.abs(analytic - fd).max()
    assert err <= rtol * scale, f"grad mismatch: err={err:g} scale={scale:g}"


def check_op_gradients(build_loss, arrays, rtol=1e-4, eps=1e-3):
    """build_loss(tensors) -> scalar Tensor; arrays are float64 leaves."""
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(*leaves)
    loss.backward(leaves=leaves)

    def run():
        with T.no_grad():
            return float(build_loss(*[T.Tensor(a) for a in arrays]).data)

    fd = fd_gradient(run, arrays, eps=eps)
    for leaf, g in zip(leaves, fd):
        assert_grad_close(leaf.grad, g, rtol=rtol)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
