"""Top-down decoder that warps coarse change features along a learned flow.

Each level predicts a per-position displacement field on the fine grid,
samples the coarse map at (p + flow(p)) / 2 with bilinear weights, adds
the fine features, and refines with a 3x3 convolution.  The flow head is
zero-initialized, so an untrained decoder degenerates to plain bilinear
upsampling.  The final head upsamples to input resolution and emits a
two-class probability map.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import conv1x1, _linear_init
from .tensor import Tensor


def _conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = T.conv2d(x, w, padding=1)
    return T.add(y, T.reshape(b, (w.shape[0], 1, 1)))


# ---------------------------------------------------------------------------
# warping

def flow_warp(coarse: Tensor, flow: Tensor) -> Tensor:
    """Sample a (C,H,W) map on the doubled grid along a displacement field.

    `flow` is (2H, 2W, 2) in (dx, dy) order, in coarse-grid pixel units.
    For fine position (i, j) the sample point on the coarse grid is
    ((j + dx) / 2, (i + dy) / 2).  The four bilinear weights are computed
    before any clamping, so they always sum to 1; out-of-range neighbor
    indices clamp to the border.
    """
    c, h, w = coarse.shape
    if flow.shape != (2 * h, 2 * w, 2):
        raise T.ShapeError(
            f"flow {flow.shape} does not match doubled grid of {coarse.shape}")
    h2, w2 = 2 * h, 2 * w
    fj = np.arange(w2, dtype=flow.dtype)[None, :]
    fi = np.arange(h2, dtype=flow.dtype)[:, None]
    sx = (fj + flow.data[..., 0]) * 0.5
    sy = (fi + flow.data[..., 1]) * 0.5
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    wx = sx - x0
    wy = sy - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    x0c = np.clip(x0i, 0, w - 1)
    x1c = np.clip(x0i + 1, 0, w - 1)
    y0c = np.clip(y0i, 0, h - 1)
    y1c = np.clip(y0i + 1, 0, h - 1)
    w00 = (1.0 - wy) * (1.0 - wx)
    w01 = (1.0 - wy) * wx
    w10 = wy * (1.0 - wx)
    w11 = wy * wx
    cd = coarse.data
    out = Tensor(w00 * cd[:, y0c, x0c] + w01 * cd[:, y0c, x1c]
                 + w10 * cd[:, y1c, x0c] + w11 * cd[:, y1c, x1c])

    if T.recording(coarse, flow):
        corners = ((y0c, x0c, w00), (y0c, x1c, w01),
                   (y1c, x0c, w10), (y1c, x1c, w11))

        def bwd(g):
            grad_coarse = None
            if coarse.requires_grad:
                base = np.arange(c)[:, None, None] * (h * w)
                acc = np.zeros(c * h * w, dtype=np.float64)
                for yc, xc, wgt in corners:
                    idx = (base + yc * w + xc).ravel()
                    acc += np.bincount(idx, weights=(g * wgt).ravel(),
                                       minlength=c * h * w)
                grad_coarse = acc.reshape(c, h, w).astype(cd.dtype)
            grad_flow = None
            if flow.requires_grad:
                dx_dir = ((1.0 - wy) * (cd[:, y0c, x1c] - cd[:, y0c, x0c])
                          + wy * (cd[:, y1c, x1c] - cd[:, y1c, x0c]))
                dy_dir = ((1.0 - wx) * (cd[:, y1c, x0c] - cd[:, y0c, x0c])
                          + wx * (cd[:, y1c, x1c] - cd[:, y0c, x1c]))
                gfx = (g * dx_dir).sum(axis=0) * 0.5
                gfy = (g * dy_dir).sum(axis=0) * 0.5
                grad_flow = np.stack([gfx, gfy], axis=-1).astype(flow.dtype)
            return (grad_coarse, grad_flow)

        T.record(out, (coarse, flow), bwd)
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling: the warp with zero displacement."""
    _, h, w = x.shape
    zero = Tensor(np.zeros((2 * h, 2 * w, 2), dtype=x.dtype))
    return flow_warp(x, zero)


# ---------------------------------------------------------------------------
# modules

class FlowMake:
    """Predict a fine-grid displacement field from a coarse/fine pair.

    Both inputs are channel-compressed by 1x1 convolutions to a common
    width, the coarse one is bilinearly doubled, and two 3x3
    convolutions turn the concatenation into (dx, dy) per fine position.
    The last convolution starts at zero: no flow until trained.
    """

    def __init__(self, c_coarse: int, c_fine: int, width: int,
                 rng: np.random.Generator):
        dt = T.default_dtype()
        self.w_cc = T.parameter(_linear_init(rng, (width, c_coarse), c_coarse))
        self.b_cc = T.parameter(np.zeros(width, dtype=dt))
        self.w_cf = T.parameter(_linear_init(rng, (width, c_fine), c_fine))
        self.b_cf = T.parameter(np.zeros(width, dtype=dt))
        self.w1 = T.parameter(_linear_init(rng, (width, 2 * width, 3, 3),
                                           2 * width * 9))
        self.b1 = T.parameter(np.zeros(width, dtype=dt))
        self.w2 = T.parameter(np.zeros((2, width, 3, 3), dtype=dt))
        self.b2 = T.parameter(np.zeros(2, dtype=dt))

    def __call__(self, coarse: Tensor, fine: Tensor) -> Tensor:
        _, h, w = coarse.shape
        if fine.shape[1:] != (2 * h, 2 * w):
            raise T.ShapeError(
                f"fine extents {fine.shape[1:]} must double coarse ({h},{w})")
        cc = conv1x1(coarse, self.w_cc, self.b_cc)
        cf = conv1x1(fine, self.w_cf, self.b_cf)
        z = T.concat([upsample2x(cc), cf], axis=0)
        z = T.silu(_conv3x3(z, self.w1, self.b1))
        field = _conv3x3(z, self.w2, self.b2)          # (2, 2H, 2W)
        return T.transpose(field, (1, 2, 0))

    def named_tensors(self, prefix: str):
        return [(prefix + n, getattr(self, n))
                for n in ("w_cc", "b_cc", "w_cf", "b_cf", "w1", "b1", "w2", "b2")]


class CfgLevel:
    """One top-down step: align the coarse map to the fine grid and merge.

    Built with ``use_flow=False`` the level owns no flow-predictor
    parameters at all and falls back to plain bilinear doubling.
    """

    def __init__(self, width: int, rng: np.random.Generator,
                 use_flow: bool = True):
        self.flow_make = FlowMake(width, width, width, rng) if use_flow else None
        self.w_post = T.parameter(_linear_init(rng, (width, width, 3, 3),
                                               width * 9))
        self.b_post = T.parameter(np.zeros(width, dtype=T.default_dtype()))

    def __call__(self, coarse: Tensor, fine: Tensor):
        if self.flow_make is not None:
            flow = self.flow_make(coarse, fine)
            warped = flow_warp(coarse, flow)
        else:
            flow = None
            warped = upsample2x(coarse)
        merged = _conv3x3(T.add(warped, fine), self.w_post, self.b_post)
        return merged, flow

    def named_tensors(self, prefix: str):
        named = []
        if self.flow_make is not None:
            named += self.flow_make.named_tensors(prefix + "flow.")
        named += [(prefix + "w_post", self.w_post),
                  (prefix + "b_post", self.b_post)]
        return named


class Decoder:
    """Three flow-guided levels from stage 4 down to stage 1, then a head.

    Every stage contributes two inputs: the scan-derived change feature
    and the channel-concat lateral.  Both are compressed to the decoder
    width and summed to form that stage's map; stage 4's map seeds the
    top of the pyramid.  After the last level the map is upsampled 4x
    (two zero-flow warps), joined with a thin full-resolution detail
    branch computed straight from the image pair, and projected to two
    class logits.

    The detail branch exists because the pyramid bottoms out at 1/4
    resolution: bilinearly stretched stride-4 features quantize mask
    boundaries to 4-pixel cells, which caps F1 around 0.85 on masks
    whose perimeter is a fair share of their area.  A few stride-1
    channels over [t1; t2] restore single-pixel edges while the pyramid
    keeps deciding which differences count.
    """

    def __init__(self, stage_channels, width: int, rng: np.random.Generator,
                 use_flow: bool = True, detail: int = 16):
        if detail < 2 or detail % 2:
            raise ValueError("detail width must be even and >= 2")
        dt = T.default_dtype()
        self.width = width
        self.detail = detail
        self.chg_w, self.chg_b, self.lat_w, self.lat_b = [], [], [], []
        for ch in stage_channels:
            self.chg_w.append(T.parameter(_linear_init(rng, (width, ch), ch)))
            self.chg_b.append(T.parameter(np.zeros(width, dtype=dt)))
            # the lateral input is [f_t1; f_t2] from one shared encoder,
            # so a [W,-W] start makes this path a feature difference:
            # near zero where the epochs agree, informative from step one
            # where they do not
            w = _linear_init(rng, (width, ch), ch)
            self.lat_w.append(T.parameter(np.concatenate([w, -w], axis=1)))
            self.lat_b.append(T.parameter(np.zeros(width, dtype=dt)))
        self.levels = [CfgLevel(width, rng, use_flow=use_flow)
                       for _ in range(3)]
        # The detail branch starts life as a local change detector, not
        # a blank slate: with the optimizer's per-weight step capped
        # near lr per iteration, a random head needs many thousands of
        # steps just to discover that |t1 - t2| matters.  Sign-paired
        # center-heavy kernels ([V,-V] over the two epochs, then +/- the
        # same projection across channel pairs) make the channel sum
        # behave like a rectified local difference, and the head starts
        # aligned with it, biased toward the no-change class.  Training
        # calibrates the threshold and hands the hard cases (global
        # jitter, context) to the pyramid, whose head block starts small
        # so its untrained features do not drown the aligned signal.
        half = detail // 2
        v = 0.05 * rng.standard_normal((half, 3, 3, 3))
        center = rng.standard_normal((half, 3))
        center *= 6.0 / np.linalg.norm(center, axis=1, keepdims=True)
        v[:, :, 1, 1] += center
        self.det_w = T.parameter(np.concatenate(
            [np.concatenate([v, -v], axis=1),
             np.concatenate([-v, v], axis=1)], axis=0).astype(dt))
        # negative bias soft-thresholds the branch: sensor noise lands in
        # silu's flat tail, so the no-change background starts almost
        # exactly at zero response.  Without this the optimizer spends
        # its first few hundred steps globally damping the branch to
        # silence the background, dragging marginal detections under
        # with it (recall dips hard before recovering).
        self.det_b = T.parameter(np.full(detail, -0.5, dtype=dt))
        # pyramid block near zero so its untrained features stay out of
        # the logits; detail block scaled so the summed response is
        # independent of the branch width
        head = 0.02 * _linear_init(rng, (2, width + detail), width)
        head[0, width:] = -8.0 / detail
        head[1, width:] = 8.0 / detail
        self.head_w = T.parameter(head.astype(dt))
        self.head_b = T.parameter(np.array([1.25, -1.25], dtype=dt))

    def _stage_map(self, s: int, change: Tensor, lateral: Tensor) -> Tensor:
        return T.add(conv1x1(change, self.chg_w[s], self.chg_b[s]),
                     conv1x1(lateral, self.lat_w[s], self.lat_b[s]))

    def __call__(self, change_feats, laterals, pair):
        """Returns (probability map (2, H0, W0), flow fields coarse-to-fine).

        `pair` is the (img1, img2) input tensors at full resolution; the
        decoder only reads them through the detail branch.
        """
        if len(change_feats) != 4 or len(laterals) != 4:
            raise T.ShapeError("decoder expects four stages of features")
        cur = self._stage_map(3, change_feats[3], laterals[3])
        flows = []
        for s in (2, 1, 0):
            fine = self._stage_map(s, change_feats[s], laterals[s])
            cur, flow = self.levels[2 - s](cur, fine)
            flows.append(flow)
        cur = upsample2x(upsample2x(cur))
        img1, img2 = pair
        if img1.shape[1:] != cur.shape[1:]:
            raise T.ShapeError(
                f"image extents {img1.shape[1:]} do not match the "
                f"upsampled pyramid {cur.shape[1:]}")
        det = T.silu(_conv3x3(T.concat([img1, img2], axis=0),
                              self.det_w, self.det_b))
        logits = conv1x1(T.concat([cur, det], axis=0),
                         self.head_w, self.head_b)
        return T.softmax(logits, axis=0), flows

    def named_tensors(self, prefix: str = "decoder."):
        named = []
        for s in range(4):
            named += [(f"{prefix}stage{s + 1}.chg_w", self.chg_w[s]),
                      (f"{prefix}stage{s + 1}.chg_b", self.chg_b[s]),
                      (f"{prefix}stage{s + 1}.lat_w", self.lat_w[s]),
                      (f"{prefix}stage{s + 1}.lat_b", self.lat_b[s])]
        for i, level in enumerate(self.levels):
            named += level.named_tensors(f"{prefix}level{i + 1}.")
        named += [(prefix + "det_w", self.det_w),
                  (prefix + "det_b", self.det_b),
                  (prefix + "head_w", self.head_w),
                  (prefix + "head_b", self.head_b)]
        return named


def predict_labels(probs) -> np.ndarray:
    """Class decision per pixel: argmax over the two probability planes."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return np.argmax(data, axis=0).astype(np.uint8)
