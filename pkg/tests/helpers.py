"""Shared test oracles: central finite differences and small builders.

The finite-difference checker is independent of the tape: it re-runs the
forward function with perturbed plain numpy inputs.
"""

from __future__ import annotations

import numpy as np

from deformmvs.autodiff import Tensor, backward


def fd_gradients(f, arrays, step=1e-5):
    """Central finite-difference gradients of scalar f(*arrays).

    f takes plain numpy arrays and returns a float. Returns one gradient
    array per input.
    """
    grads = []
    for i, a in enumerate(arrays):
        a = np.asarray(a, dtype=np.float64)
        g = np.zeros_like(a)
        flat = g.reshape(-1)
        for j in range(a.size):
            hi = [x.copy() for x in arrays]
            lo = [x.copy() for x in arrays]
            hi[i].reshape(-1)[j] += step
            lo[i].reshape(-1)[j] -= step
            flat[j] = (f(*hi) - f(*lo)) / (2.0 * step)
        grads.append(g)
    return grads


def fd_entry(f, arrays, which, flat_idx, step=1e-5):
    """Central difference of scalar f(*arrays) w.r.t. one array entry."""
    hi = [a.copy() for a in arrays]
    lo = [a.copy() for a in arrays]
    hi[which].reshape(-1)[flat_idx] += step
    lo[which].reshape(-1)[flat_idx] -= step
    return (f(*hi) - f(*lo)) / (2.0 * step)


def check_gradients(build, arrays, rel_tol=1e-4, step=1e-5, floor=1e-8):
    """Compare tape gradients of build(*tensors) against finite differences.

    build maps Tensors to a scalar Tensor. Asserts max relative error below
    rel_tol wherever |analytic| > floor; elsewhere requires absolute
    agreement within rel_tol.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    tape = backward(loss)
    analytic = [tape.grad(t) for t in tensors]
    numeric = fd_gradients(lambda *xs: build(*[Tensor(x) for x in xs]).item(), list(arrays), step)
    for a, n in zip(analytic, numeric):
        assert a is not None, "missing gradient for a tracked input"
        big = np.abs(a) > floor
        if big.any():
            rel = np.abs(a[big] - n[big]) / np.abs(a[big])
            assert rel.max() < rel_tol, f"max rel grad error {rel.max():.3e} >= {rel_tol}"
        small = ~big
        if small.any():
            assert np.abs(a[small] - n[small]).max() < rel_tol, "near-zero gradient mismatch"
