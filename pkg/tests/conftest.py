"""Shared fixtures and the central finite-difference gradient checker."""

import numpy as np
import pytest

from changescan import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def numeric_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f at x, elementwise."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        fp = f(x)
        flat[i] = keep - step
        fm = f(x)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def check_grads(build, arrays, rel_tol: float = 1e-6, step: float = 1e-5):
    """Compare tape gradients against finite differences in 64-bit.

    `build(*tensors)` must return a scalar Tensor.  `arrays` is a list of
    float arrays; every one is treated as a differentiable leaf.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with T.precision(np.float64):
        leaves = [T.parameter(a.copy()) for a in arrays]
        with T.Tape() as tape:
            loss = build(*leaves)
        tape.backward(loss)

        for i, a in enumerate(arrays):
            def f(x, i=i):
                probe = [arr.copy() for arr in arrays]
                probe[i] = x
                vals = [T.Tensor(p) for p in probe]
                return build(*vals).item()

            num = numeric_grad(f, a.copy(), step=step)
            got = leaves[i].grad
            assert got is not None, f"no gradient reached leaf {i}"
            denom = max(np.abs(num).max(), np.abs(got).max(), 1e-8)
            rel = np.abs(got - num).max() / denom
            assert rel < rel_tol, (
                f"leaf {i}: rel err {rel:.3e} exceeds {rel_tol:.1e}\n"
                f"analytic:\n{got}\nnumeric:\n{num}"
            )
