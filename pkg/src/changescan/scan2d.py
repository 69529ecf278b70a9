"""Two-pass selective scan over a grid, with a closed-form test oracle.

Forward semantics on an (H, W, ...) grid with zero boundaries:

    h_hor[i, j] = a[i, j] * h_hor[i, j-1] + b[i, j]     (along each row)
    h[i, j]     = a[i, j] * h[i-1, j]    + h_hor[i, j]  (along each column)

The same decay factor `a` drives both passes.  Every output position
therefore aggregates its entire upper-left quadrant.  Reverse mode runs
the transposed recurrences (bottom-up, then right-to-left) and comes for
free from composing the 1D scan's adjoint.
"""

from __future__ import annotations

import time

import numpy as np

from . import scan1d
from . import tensor as T
from .tensor import Tensor

ORACLE_MAX_POSITIONS = 1024


def _swap_rows_cols(t: Tensor) -> Tensor:
    perm = (1, 0) + tuple(range(2, t.ndim))
    return T.transpose(t, perm)


def scan2d_states(a_bar: Tensor, bx: Tensor, parallel: bool = True,
                  chunk: int = 64) -> Tensor:
    """All grid states h[i, j]; trailing lane dims ride along."""
    if a_bar.shape != bx.shape:
        raise T.ShapeError(
            f"grid factors {a_bar.shape} and values {bx.shape} differ")
    if a_bar.ndim < 2:
        raise T.ShapeError(f"grid input must be at least 2-D, got {a_bar.shape}")
    ah = _swap_rows_cols(a_bar)
    bh = _swap_rows_cols(bx)
    h_hor = _swap_rows_cols(scan1d.scan(ah, bh, parallel=parallel, chunk=chunk))
    return scan1d.scan(a_bar, h_hor, parallel=parallel, chunk=chunk)


def scan2d_forward(a_bar: Tensor, bx: Tensor, c_seq: Tensor,
                   parallel: bool = True, chunk: int = 64) -> Tensor:
    """States plus readout: y[i,j,c] = sum_n c[i,j,n] * h[i,j,c,n]."""
    h = scan2d_states(a_bar, bx, parallel=parallel, chunk=chunk)
    H, W, C, N = h.shape
    return T.tsum(T.mul(h, T.reshape(c_seq, (H, W, 1, N))), axis=3)


def scan2d_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Closed-form states, independent of the two-pass implementation.

    h[i,j] = sum over (i',j') in the upper-left quadrant of
    (prod of a[l,j] for l in i'+1..i) * (prod of a[i',k] for k in j'+1..j)
    * b[i',j'].  With constant a both products collapse to a raised to the
    Manhattan distance.  Quadratic cost per position: test-scale only.
    """
    H, W = a.shape[:2]
    if H * W > ORACLE_MAX_POSITIONS:
        raise ValueError(
            f"oracle limited to {ORACLE_MAX_POSITIONS} positions, got {H * W}")
    lanes = a.shape[2:]
    one_col = np.ones((1,) + lanes, dtype=a.dtype)
    h = np.empty_like(b)
    for i in range(H):
        for j in range(W):
            down = a[1:i + 1, j]                      # vertical multipliers
            vert = np.concatenate(
                [np.flip(np.cumprod(np.flip(down, 0), axis=0), 0), one_col])
            right = a[:i + 1, 1:j + 1]                # per-row horizontal
            rc = np.flip(np.cumprod(np.flip(right, 1), axis=1), 1)
            horz = np.concatenate(
                [rc, np.ones((i + 1, 1) + lanes, dtype=a.dtype)], axis=1)
            block = vert[:, None] * horz * b[:i + 1, :j + 1]
            h[i, j] = block.sum(axis=(0, 1))
    return h


# ---------------------------------------------------------------------------
# timing

def time_scan(side: int, variant: str, dtype=np.float32, channels: int = 16,
              state_dim: int = 8, repeats: int = 3,
              rng: np.random.Generator | None = None) -> float:
    """Best-of-`repeats` wall time in milliseconds for one forward pass.

    The grid carries a realistic channel/state load so the measurement
    reflects the scan arithmetic rather than interpreter overhead.
    """
    if variant not in ("seq", "par", "oracle"):
        raise ValueError(f"unknown variant {variant!r}")
    rng = rng or np.random.default_rng(0)
    lanes = (channels, state_dim)
    a = rng.uniform(0.5, 0.99, size=(side, side) + lanes).astype(dtype)
    b = rng.standard_normal((side, side) + lanes).astype(dtype)
    if variant == "oracle" and side * side > ORACLE_MAX_POSITIONS:
        raise ValueError(
            f"oracle limited to {ORACLE_MAX_POSITIONS} positions, got {side * side}")

    def run():
        if variant == "oracle":
            return scan2d_oracle(a, b)
        ta, tb = Tensor(a), Tensor(b)
        return scan2d_states(ta, tb, parallel=(variant == "par"))

    run()  # warm caches before timing
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def fit_loglog_slope(sizes, millis) -> float:
    """Least-squares slope of log(time) against log(positions)."""
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(millis, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])
