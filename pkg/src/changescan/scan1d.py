"""Input-dependent state-space recurrence along one axis.

The recurrence is h_t = a_t * h_{t-1} + b_t with h_0 = 0, applied
independently over any number of trailing lane dimensions.  `a_t` and
`b_t` come from `discretize`, which turns channel features into
per-position decay factors in (0,1) and injected values.  Two kernels
compute the same states: a plain left-to-right loop and a chunked scan
built on the associative combine operator; both share one analytic
backward (a right-to-left adjoint recurrence).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


# ---------------------------------------------------------------------------
# parameters

@dataclass
class SsmParams:
    """Learnable state-space parameters for one scan direction.

    The diagonal transition is A = -exp(log_a), strictly negative so the
    discretized factor exp(delta * A) stays inside (0,1) for delta > 0.
    B and C are produced from the input by linear maps shared across
    channels; delta is per channel with its own bias.
    """

    log_a: Tensor     # (C, N)
    w_b: Tensor       # (C, N)
    w_c: Tensor       # (C, N)
    w_delta: Tensor   # (C, C)
    b_delta: Tensor   # (C,)

    @property
    def channels(self) -> int:
        return self.log_a.shape[0]

    @property
    def state_dim(self) -> int:
        return self.log_a.shape[1]

    def named_tensors(self, prefix: str = ""):
        return [
            (prefix + "log_a", self.log_a),
            (prefix + "w_b", self.w_b),
            (prefix + "w_c", self.w_c),
            (prefix + "w_delta", self.w_delta),
            (prefix + "b_delta", self.b_delta),
        ]


def init_ssm_params(channels: int, state_dim: int,
                    rng: np.random.Generator) -> SsmParams:
    """Stable default initialization.

    log_a starts at log(1..N) per channel, so the d-th state decays with
    rate d.  The delta bias is spread log-uniformly so softplus(bias)
    lands in [1e-3, 0.1], giving a mix of slow and fast channels from
    step one.
    """
    dt = T.default_dtype()
    la = np.log(np.arange(1, state_dim + 1, dtype=np.float64))
    log_a = np.broadcast_to(la, (channels, state_dim)).astype(dt)
    scale = 1.0 / np.sqrt(channels)
    w_b = (rng.standard_normal((channels, state_dim)) * scale).astype(dt)
    w_c = (rng.standard_normal((channels, state_dim)) * scale).astype(dt)
    w_delta = (rng.standard_normal((channels, channels)) * scale).astype(dt)
    target = np.exp(rng.uniform(np.log(1e-3), np.log(0.1), size=channels))
    b_delta = np.log(np.expm1(target)).astype(dt)  # softplus inverse
    return SsmParams(
        log_a=T.parameter(log_a.copy()),
        w_b=T.parameter(w_b),
        w_c=T.parameter(w_c),
        w_delta=T.parameter(w_delta),
        b_delta=T.parameter(b_delta),
    )


@dataclass
class DiscretizedStep:
    """Per-position transition factors: h gets a_bar * h_prev + bx."""

    a_bar: Tensor  # (L, C, N), each value in (0, 1)
    bx: Tensor     # (L, C, N)


def discretize(params: SsmParams, x: Tensor):
    """Turn features (L, C) into per-position scan inputs.

    delta = softplus(x W_delta + b_delta) per channel, a_bar =
    exp(delta * A), bx = delta * B(x) * x, and the readout weights
    c_seq = x W_c shared across channels.  Returns (steps, c_seq).
    """
    L, C = x.shape
    N = params.state_dim
    pre = T.add(x @ params.w_delta, T.reshape(params.b_delta, (1, C)))
    T.ensure_finite(pre, "delta projection")
    delta = T.softplus(pre)                                   # (L, C)
    a_diag = T.neg(T.texp(params.log_a))                      # (C, N), < 0
    d3 = T.reshape(delta, (L, C, 1))
    a_bar = T.texp(T.mul(d3, T.reshape(a_diag, (1, C, N))))   # (L, C, N)
    b_of_x = x @ params.w_b                                   # (L, N)
    T.ensure_finite(b_of_x, "B projection")
    bx = T.mul(T.mul(d3, T.reshape(b_of_x, (L, 1, N))),
               T.reshape(x, (L, C, 1)))                       # (L, C, N)
    c_seq = x @ params.w_c                                    # (L, N)
    T.ensure_finite(c_seq, "C projection")
    return DiscretizedStep(a_bar=a_bar, bx=bx), c_seq


# ---------------------------------------------------------------------------
# scan kernels (ndarray level)

def combine(left, right):
    """Associative pairing: applying (a1,b1) then (a2,b2) equals this pair."""
    a1, b1 = left
    a2, b2 = right
    return (a1 * a2, a2 * b1 + b2)


def scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Left-to-right reference kernel over axis 0; lanes ride along."""
    h = np.empty_like(b)
    acc = np.zeros_like(b[0])
    for t in range(b.shape[0]):
        np.multiply(acc, a[t], out=acc)
        np.add(acc, b[t], out=acc)
        h[t] = acc
    return h


def scan_parallel(a: np.ndarray, b: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Chunked scan: local scans run lock-step across all chunks at once.

    The sequence is padded with identity elements (a=1, b=0) to a chunk
    multiple, which leaves the states of real positions untouched.  Chunk
    carries are combined sequentially (one short loop), then folded back
    into the local results as h = aprod * carry + h_local.
    """
    L = b.shape[0]
    if L <= chunk:
        return scan_sequential(a, b)
    lanes = b.shape[1:]
    pad = (-L) % chunk
    if pad:
        a = np.concatenate([a, np.ones((pad,) + lanes, dtype=a.dtype)])
        b = np.concatenate([b, np.zeros((pad,) + lanes, dtype=b.dtype)])
    nc = a.shape[0] // chunk
    ac = a.reshape((nc, chunk) + lanes)
    bc = b.reshape((nc, chunk) + lanes)

    hloc = np.empty_like(bc)
    acc = np.zeros_like(bc[:, 0])
    for t in range(chunk):
        np.multiply(acc, ac[:, t], out=acc)
        np.add(acc, bc[:, t], out=acc)
        hloc[:, t] = acc
    aprod = np.cumprod(ac, axis=1)

    carry = np.zeros_like(bc[:, 0])             # state entering each chunk
    for c in range(1, nc):
        carry[c] = aprod[c - 1, -1] * carry[c - 1] + hloc[c - 1, -1]

    h = aprod * carry[:, None] + hloc
    return h.reshape((nc * chunk,) + lanes)[:L]


def _scan_adjoint(a: np.ndarray, h: np.ndarray,
                  grad_h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode rule for h = scan(a, b).

    The multiplier lam_t = grad_h_t + a_{t+1} lam_{t+1} is itself a scan
    run right-to-left with the decay sequence shifted by one; it is
    accumulated in place straight into a copy of grad_h.  Then
    grad_b = lam and grad_a_t = lam_t * h_{t-1}.
    """
    lam = np.array(grad_h, dtype=a.dtype, copy=True)
    for t in range(a.shape[0] - 2, -1, -1):
        lam[t] += a[t + 1] * lam[t + 1]
    grad_a = np.empty_like(lam)
    grad_a[0] = 0.0
    np.multiply(lam[1:], h[:-1], out=grad_a[1:])
    return grad_a, lam


def scan(a_bar: Tensor, bx: Tensor, parallel: bool = True,
         chunk: int = 64) -> Tensor:
    """Differentiable recurrence h_t = a_t h_{t-1} + b_t along axis 0."""
    if a_bar.shape != bx.shape:
        raise T.ShapeError(
            f"scan factors {a_bar.shape} and values {bx.shape} differ")
    kernel = (lambda a, b: scan_parallel(a, b, chunk)) if parallel \
        else scan_sequential
    h = kernel(a_bar.data, bx.data)
    out = Tensor(h)
    if T.recording(a_bar, bx):
        def bwd(g):
            return _scan_adjoint(a_bar.data, h, g)
        T.record(out, (a_bar, bx), bwd)
    return out


def aggregate_output(h: Tensor, c_seq: Tensor) -> Tensor:
    """Readout y_t[c] = sum_n c_t[n] * h_t[c, n]."""
    L, C, N = h.shape
    return T.tsum(T.mul(h, T.reshape(c_seq, (L, 1, N))), axis=2)


def selective_scan(params: SsmParams, x: Tensor, parallel: bool = True,
                   chunk: int = 64) -> Tensor:
    """Full 1D pipeline: discretize, scan, read out.  (L,C) -> (L,C)."""
    steps, c_seq = discretize(params, x)
    h = scan(steps.a_bar, steps.bx, parallel=parallel, chunk=chunk)
    return aggregate_output(h, c_seq)
