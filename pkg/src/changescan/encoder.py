"""Hierarchical feature encoder built from gated 2D-scan blocks.

Layout is channel-major (C, H, W).  A stem reduces the input by 4x, then
four stages alternate scan blocks with 2x patch-merge downsampling, so
stage s emits channels C * 2^(s-1) at 1/2^(s+1) resolution.  The same
encoder object serves both images of a pair: weight sharing is pointer
identity, not copied weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import scan1d, scan2d
from . import tensor as T
from .tensor import Tensor

_LN_EPS = 1e-5


@dataclass
class EncoderConfig:
    in_channels: int = 3
    base_channels: int = 16
    state_dim: int = 8
    stage_depths: tuple[int, int, int, int] = (1, 1, 2, 1)
    conv_kernel: int = 3
    expansion: int = 2
    conv_mode: str = "3x3"   # or "1x3" for a strictly rowwise mixer
    scan_2d: bool = True     # False: flatten to one row-major 1D scan

    def __post_init__(self):
        if len(self.stage_depths) != 4:
            raise ValueError("stage_depths must list four stages")
        if any(d < 1 for d in self.stage_depths):
            raise ValueError("stage depths must be positive")
        if min(self.base_channels, self.state_dim, self.expansion) < 1:
            raise ValueError("channel, state, and expansion sizes must be positive")
        if self.conv_mode not in ("3x3", "1x3"):
            raise ValueError(f"unknown conv_mode {self.conv_mode!r}")

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * 2 ** (stage - 1)


@dataclass
class FeatureMap:
    data: Tensor
    stage: int
    time_tag: str = "T1"

    @property
    def shape(self):
        return self.data.shape


# ---------------------------------------------------------------------------
# shared layer helpers

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize over the channel axis at every spatial site."""
    c = x.shape[0]
    mu = T.tmean(x, axis=0, keepdims=True)
    xc = T.sub(x, mu)
    var = T.tmean(T.mul(xc, xc), axis=0, keepdims=True)
    xn = T.div(xc, T.tsqrt(T.add(var, _LN_EPS)))
    return T.add(T.mul(xn, T.reshape(gamma, (c, 1, 1))),
                 T.reshape(beta, (c, 1, 1)))


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise channel mix: (C,H,W) with weight (C_out, C_in)."""
    c, h, wd = x.shape
    y = w @ T.reshape(x, (c, h * wd))
    if b is not None:
        y = T.add(y, T.reshape(b, (w.shape[0], 1)))
    return T.reshape(y, (w.shape[0], h, wd))


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(
        T.default_dtype())


def _linear_init(rng, shape, fan_in):
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(
        T.default_dtype())


# ---------------------------------------------------------------------------
# stem

class Stem:
    """Two stride-2 3x3 convolutions: (3, H, W) -> (C, H/4, W/4)."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        c_in, c = cfg.in_channels, cfg.base_channels
        self.w1 = T.parameter(_he(rng, (c, c_in, 3, 3), c_in * 9))
        self.b1 = T.parameter(np.zeros(c, dtype=T.default_dtype()))
        self.w2 = T.parameter(_he(rng, (c, c, 3, 3), c * 9))
        self.b2 = T.parameter(np.zeros(c, dtype=T.default_dtype()))

    def __call__(self, image: Tensor, strict: bool = True) -> Tensor:
        _, h, w = image.shape
        divisor = 32 if strict else 4
        if h % divisor or w % divisor:
            raise T.ShapeError(
                f"input extents {h}x{w} must be divisible by {divisor}")
        c = self.w1.shape[0]
        y = T.conv2d(image, self.w1, stride=2, padding=1)
        y = T.silu(T.add(y, T.reshape(self.b1, (c, 1, 1))))
        y = T.conv2d(y, self.w2, stride=2, padding=1)
        return T.add(y, T.reshape(self.b2, (c, 1, 1)))

    def named_tensors(self, prefix: str):
        return [(prefix + "w1", self.w1), (prefix + "b1", self.b1),
                (prefix + "w2", self.w2), (prefix + "b2", self.b2)]


# ---------------------------------------------------------------------------
# the scan block

_ORIENTATIONS = ((), (1,), (0,), (0, 1))  # identity, hflip, vflip, both


class Mamba2DBlock:
    """Gated block: norm, project, mix, scan four ways, gate, project back.

    Branch 1 expands channels, mixes locally with a depthwise
    convolution, applies SiLU, then runs the grid scan over the four
    axis-flip orientations and sums, so every position sees the whole
    map.  Branch 2 is a projected SiLU gate.  Their product is projected
    back to the input width and added to the residual path.
    """

    def __init__(self, channels: int, cfg: EncoderConfig,
                 rng: np.random.Generator):
        e = channels * cfg.expansion
        self.channels = channels
        self.expanded = e
        self.conv_mode = cfg.conv_mode
        self.scan_2d = cfg.scan_2d
        dt = T.default_dtype()
        self.ln_g = T.parameter(np.ones(channels, dtype=dt))
        self.ln_b = T.parameter(np.zeros(channels, dtype=dt))
        self.w_in1 = T.parameter(_linear_init(rng, (e, channels), channels))
        self.b_in1 = T.parameter(np.zeros(e, dtype=dt))
        kshape = (e, 3, 3) if cfg.conv_mode == "3x3" else (e, 1, 3)
        self.w_dw = T.parameter(_linear_init(rng, kshape, kshape[1] * kshape[2]))
        self.ssm = scan1d.init_ssm_params(e, cfg.state_dim, rng)
        self.ln2_g = T.parameter(np.ones(e, dtype=dt))
        self.ln2_b = T.parameter(np.zeros(e, dtype=dt))
        self.w_in2 = T.parameter(_linear_init(rng, (e, channels), channels))
        self.b_in2 = T.parameter(np.zeros(e, dtype=dt))
        self.w_out = T.parameter(_linear_init(rng, (channels, e), e))
        self.b_out = T.parameter(np.zeros(channels, dtype=dt))

    def _scan_four_ways(self, u: Tensor, parallel: bool,
                        use_2d: bool) -> Tensor:
        """(E,H,W) -> (E,H,W): orientation-summed selective scan.

        The four flip orientations ride the scan as one extra lane axis,
        so the whole block costs two recurrence passes instead of eight.
        With ``use_2d=False`` the stack is flattened row-major and
        scanned as one long sequence instead of running the grid
        recurrence.  On single-row maps the two agree exactly.
        """
        e, h, w = u.shape
        n = self.ssm.state_dim
        flat = T.reshape(T.transpose(u, (1, 2, 0)), (h * w, e))
        steps, c_seq = scan1d.discretize(self.ssm, flat)
        a4 = T.reshape(steps.a_bar, (h, w, e, n))
        b4 = T.reshape(steps.bx, (h, w, e, n))
        c3 = T.reshape(c_seq, (h, w, n))
        briefs = [(T.flip(a4, x), T.flip(b4, x), T.flip(c3, x)) if x
                  else (a4, b4, c3) for x in _ORIENTATIONS]
        a5 = T.stack([t[0] for t in briefs], axis=2)   # (H, W, 4, E, N)
        b5 = T.stack([t[1] for t in briefs], axis=2)
        c5 = T.reshape(T.stack([t[2] for t in briefs], axis=2),
                       (h, w, 4, 1, n))
        if use_2d:
            hs = scan2d.scan2d_states(a5, b5, parallel=parallel)
        else:
            hs = scan1d.scan(T.reshape(a5, (h * w, 4, e, n)),
                             T.reshape(b5, (h * w, 4, e, n)),
                             parallel=parallel)
            hs = T.reshape(hs, (h, w, 4, e, n))
        y_all = T.tsum(T.mul(hs, c5), axis=4)          # (H, W, 4, E)
        total = None
        for o, axes in enumerate(_ORIENTATIONS):
            yo = T.reshape(T.slice_axis(y_all, 2, o, 1), (h, w, e))
            if axes:
                yo = T.flip(yo, axes)
            total = yo if total is None else T.add(total, yo)
        return T.transpose(total, (2, 0, 1))

    def __call__(self, x: Tensor, parallel: bool = True,
                 use_2d: bool | None = None) -> Tensor:
        if use_2d is None:
            use_2d = self.scan_2d
        z = layer_norm(x, self.ln_g, self.ln_b)
        u = conv1x1(z, self.w_in1, self.b_in1)
        if self.conv_mode == "3x3":
            u = T.depthwise_conv2d(u, self.w_dw, padding=1)
        else:
            u = T.depthwise_conv2d(u, self.w_dw, padding=(0, 1))
        u = T.silu(u)
        y = self._scan_four_ways(u, parallel, use_2d)
        y = layer_norm(y, self.ln2_g, self.ln2_b)
        gate = T.silu(conv1x1(z, self.w_in2, self.b_in2))
        out = conv1x1(T.mul(y, gate), self.w_out, self.b_out)
        return T.add(x, out)

    def named_tensors(self, prefix: str):
        own = [(prefix + name, getattr(self, name)) for name in
               ("ln_g", "ln_b", "w_in1", "b_in1", "w_dw", "ln2_g", "ln2_b",
                "w_in2", "b_in2", "w_out", "b_out")]
        return own + self.ssm.named_tensors(prefix + "ssm.")


# ---------------------------------------------------------------------------
# downsampling and stages

class PatchMerge:
    """2x2 stride-2 reduction that doubles channels.

    Each 2x2 cell is flattened channel-major (channel, cell row, cell
    column) and mixed by a (4C, 2C) matrix, which is exactly a 2x2
    stride-2 convolution written as one matmul.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.w = T.parameter(_linear_init(rng, (4 * channels, 2 * channels),
                                          4 * channels))
        self.b = T.parameter(np.zeros(2 * channels, dtype=T.default_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        if h % 2 or w % 2:
            raise T.ShapeError(f"cannot halve odd extents {h}x{w}")
        cells = T.reshape(x, (c, h // 2, 2, w // 2, 2))
        cells = T.transpose(cells, (1, 3, 0, 2, 4))           # (H/2,W/2,C,2,2)
        flat = T.reshape(cells, (h // 2 * (w // 2), 4 * c))
        y = T.add(flat @ self.w, T.reshape(self.b, (1, 2 * c)))
        y = T.reshape(y, (h // 2, w // 2, 2 * c))
        return T.transpose(y, (2, 0, 1))

    def named_tensors(self, prefix: str):
        return [(prefix + "w", self.w), (prefix + "b", self.b)]


class Stage:
    """Consecutive blocks plus an aggregator over their outputs.

    The aggregator sums the block outputs and applies a pointwise
    projection.  The projection starts at identity / depth, so the stage
    initially averages its block outputs and keeps activation scale flat
    across depths.
    """

    def __init__(self, channels: int, depth: int, cfg: EncoderConfig,
                 rng: np.random.Generator):
        self.blocks = [Mamba2DBlock(channels, cfg, rng) for _ in range(depth)]
        self.agg_w = T.parameter(
            np.eye(channels, dtype=T.default_dtype()) / depth)
        self.agg_b = T.parameter(np.zeros(channels, dtype=T.default_dtype()))

    def __call__(self, x: Tensor, parallel: bool = True) -> Tensor:
        outs = []
        for block in self.blocks:
            x = block(x, parallel=parallel)
            outs.append(x)
        total = outs[0]
        for o in outs[1:]:
            total = T.add(total, o)
        return conv1x1(total, self.agg_w, self.agg_b)

    def named_tensors(self, prefix: str):
        named = [(prefix + "agg_w", self.agg_w), (prefix + "agg_b", self.agg_b)]
        for i, blk in enumerate(self.blocks):
            named += blk.named_tensors(f"{prefix}block{i}.")
        return named


class Encoder:
    """Stem plus four stages; emits one feature map per stage."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stem = Stem(cfg, rng)
        self.stages = []
        self.merges = []
        for s in range(1, 5):
            ch = cfg.stage_channels(s)
            self.stages.append(Stage(ch, cfg.stage_depths[s - 1], cfg, rng))
            if s < 4:
                self.merges.append(PatchMerge(ch, rng))

    def encode(self, image: Tensor, time_tag: str = "T1",
               parallel: bool = True, strict: bool = True) -> list[FeatureMap]:
        x = self.stem(image, strict=strict)
        maps = []
        for s in range(4):
            x = self.stages[s](x, parallel=parallel)
            maps.append(FeatureMap(data=x, stage=s + 1, time_tag=time_tag))
            if s < 3:
                x = self.merges[s](x)
        return maps

    def named_tensors(self, prefix: str = "encoder."):
        named = self.stem.named_tensors(prefix + "stem.")
        for s, stage in enumerate(self.stages):
            named += stage.named_tensors(f"{prefix}stage{s + 1}.")
        for s, merge in enumerate(self.merges):
            named += merge.named_tensors(f"{prefix}merge{s + 1}.")
        return named
