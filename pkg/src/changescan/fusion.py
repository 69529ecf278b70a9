"""Bi-temporal fusion: channel concat, parity interleave, change extraction.

Two fusion routes feed the decoder.  The channel route (`ccf`) stacks
both feature maps along channels.  The spatial route (`srf`) doubles the
grid and interleaves the two maps by cell parity, so a scan over the
reorganized map alternates between the two time points; `StcBlock` runs
scan blocks over that map and folds the four phase sub-grids back to the
original resolution.

Parity layout of `srf` on cell (2m+a, 2n+b): positions with a != b hold
the first map, positions with a == b hold the second.  A single cell
therefore looks like [[t2, t1], [t1, t2]].
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, FeatureMap, Mamba2DBlock, conv1x1, _linear_init
from .tensor import Tensor

PHASES = ((0, 0), (0, 1), (1, 0), (1, 1))


def _unwrap(f) -> Tensor:
    return f.data if isinstance(f, FeatureMap) else f


def _check_pair(f1, f2):
    if isinstance(f1, FeatureMap) and isinstance(f2, FeatureMap):
        if f1.stage != f2.stage:
            raise T.ShapeError(
                f"cannot fuse stage {f1.stage} with stage {f2.stage}")
    a, b = _unwrap(f1), _unwrap(f2)
    if a.shape != b.shape:
        raise T.ShapeError(f"extent mismatch: {a.shape} vs {b.shape}")
    return a, b


def ccf(f1, f2) -> Tensor:
    """Channel concat, first map first: (C,H,W) x 2 -> (2C,H,W)."""
    a, b = _check_pair(f1, f2)
    return T.concat([a, b], axis=0)


def srf(f1, f2) -> Tensor:
    """Parity interleave onto a doubled grid: (C,H,W) x 2 -> (C,2H,2W)."""
    a, b = _check_pair(f1, f2)
    c, h, w = a.shape
    # even rows alternate (t2, t1, ...), odd rows (t1, t2, ...)
    row_even = T.reshape(T.stack([b, a], axis=3), (c, h, 2 * w))
    row_odd = T.reshape(T.stack([a, b], axis=3), (c, h, 2 * w))
    return T.reshape(T.stack([row_even, row_odd], axis=2), (c, 2 * h, 2 * w))


def deinterleave(grid: Tensor):
    """The four phase sub-grids of a doubled map, in PHASES order."""
    c, h2, w2 = grid.shape
    if h2 % 2 or w2 % 2:
        raise T.ShapeError(f"doubled grid has odd extents {h2}x{w2}")
    cells = T.reshape(grid, (c, h2 // 2, 2, w2 // 2, 2))
    out = []
    for a, b in PHASES:
        p = T.slice_axis(T.slice_axis(cells, 2, a, 1), 4, b, 1)
        out.append(T.reshape(p, (c, h2 // 2, w2 // 2)))
    return tuple(out)


def deinterleave_pair(grid: Tensor):
    """Inverse of srf: recover (first map, second map) from the layout."""
    p00, p01, p10, p11 = deinterleave(grid)
    return p01, p00


class StcBlock:
    """Change feature from one bi-temporal pair at one stage.

    srf -> scan blocks on the doubled grid -> de-interleave -> channel
    concat of the four phases (4C) -> pointwise reduction back to C.
    """

    def __init__(self, channels: int, cfg: EncoderConfig,
                 rng: np.random.Generator, n_blocks: int = 1):
        self.channels = channels
        self.blocks = [Mamba2DBlock(channels, cfg, rng)
                       for _ in range(n_blocks)]
        # phase-contrast start: the diagonal phases carry the second map
        # and the off-diagonal ones the first, so [W,-W,-W,W] reads
        # W (t2 - t1) and the change feature is near zero wherever the
        # inputs agree.  A plain random mix buries that signal and costs
        # the optimizer most of its budget rediscovering it.
        w = 0.5 * _linear_init(rng, (channels, channels), channels)
        self.w_mix = T.parameter(np.concatenate([w, -w, -w, w], axis=1))
        self.b_mix = T.parameter(np.zeros(channels, dtype=T.default_dtype()))

    def __call__(self, f1, f2, parallel: bool = True) -> Tensor:
        grid = srf(f1, f2)
        for blk in self.blocks:
            grid = blk(grid, parallel=parallel)
        phases = deinterleave(grid)
        stacked = T.concat(phases, axis=0)
        return conv1x1(stacked, self.w_mix, self.b_mix)

    def named_tensors(self, prefix: str):
        named = [(prefix + "w_mix", self.w_mix), (prefix + "b_mix", self.b_mix)]
        for i, blk in enumerate(self.blocks):
            named += blk.named_tensors(f"{prefix}block{i}.")
        return named
