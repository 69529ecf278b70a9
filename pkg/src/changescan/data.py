"""Bi-temporal sample pairs: synthetic generation, PNG I/O, and tiling.

The synthetic generator stands in for real survey data.  Each sample
shares one smooth background between the two epochs, keeps a few static
shapes in both, and inserts or removes a few others; the label is the
exact union of the changed shapes' pixels.  The second epoch then gets a
global intensity jitter and both get additive noise, so the net has to
learn structure rather than pixel equality.

On disk a dataset is root/{A,B,label}/<id>.png with A = first epoch,
B = second epoch, label = change mask (nonzero means change).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import tensor as T
from .viz import IoError, save_image, save_mask

DEFAULT_SUBDIRS = ("A", "B", "label")


@dataclass
class SamplePair:
    img_t1: np.ndarray          # (3,H,W) float32 in [0,1]
    img_t2: np.ndarray
    label: np.ndarray           # (H,W) uint8 in {0,1}
    id: str

    def __post_init__(self):
        if self.img_t1.shape != self.img_t2.shape:
            raise T.ShapeError(
                f"epoch extents differ: {self.img_t1.shape} vs "
                f"{self.img_t2.shape}")
        if self.img_t1.shape[1:] != self.label.shape:
            raise T.ShapeError(
                f"label {self.label.shape} does not match image "
                f"{self.img_t1.shape}")


@dataclass
class SynthConfig:
    count: int = 10
    height: int = 64
    width: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    static_shapes: int = 2
    jitter: float = 0.1
    noise: float = 0.05
    seed: int = 0
    kinds: tuple = ("rect", "ellipse")

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("need at least one sample")
        if self.height % 32 or self.width % 32:
            raise ValueError(
                f"extents must be divisible by 32, got "
                f"{self.height}x{self.width}")
        if not (0 <= self.min_shapes <= self.max_shapes):
            raise ValueError("shape count range must satisfy 0 <= lo <= hi")
        unknown = set(self.kinds) - {"rect", "ellipse"}
        if unknown:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")


# ---------------------------------------------------------------------------
# synthetic generation

def _bilinear_grid(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    """Stretch a small grid to (h, w) with bilinear interpolation."""
    ch, cw = coarse.shape
    ys = np.linspace(0.0, ch - 1.0, h)
    xs = np.linspace(0.0, cw - 1.0, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, ch - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, cw - 2)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    tl = coarse[np.ix_(y0, x0)]
    tr = coarse[np.ix_(y0, x0 + 1)]
    bl = coarse[np.ix_(y0 + 1, x0)]
    br = coarse[np.ix_(y0 + 1, x0 + 1)]
    return ((1 - wy) * (1 - wx) * tl + (1 - wy) * wx * tr
            + wy * (1 - wx) * bl + wy * wx * br)


def _background(rng, h, w) -> np.ndarray:
    bg = np.stack([_bilinear_grid(rng.random((5, 5)), h, w)
                   for _ in range(3)])
    return 0.25 + 0.4 * bg          # mid-tones leave contrast headroom


def _shape_mask(rng, h, w, kinds) -> np.ndarray:
    kind = kinds[rng.integers(len(kinds))]
    sh = int(rng.integers(6, max(7, h // 3)))
    sw = int(rng.integers(6, max(7, w // 3)))
    y = int(rng.integers(0, h - sh + 1))
    x = int(rng.integers(0, w - sw + 1))
    mask = np.zeros((h, w), dtype=bool)
    if kind == "rect":
        mask[y:y + sh, x:x + sw] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = y + sh / 2.0, x + sw / 2.0
        mask = (((yy - cy) / (sh / 2.0)) ** 2
                + ((xx - cx) / (sw / 2.0)) ** 2) <= 1.0
    return mask


def _paint(img: np.ndarray, mask: np.ndarray, rng) -> None:
    """Fill the mask with a color pushed well away from what is under it."""
    under = img[:, mask].mean(axis=1)
    sign = np.where(under > 0.5, -1.0, 1.0)
    color = np.clip(under + sign * rng.uniform(0.35, 0.6, size=3), 0.0, 1.0)
    img[:, mask] = color[:, None] + rng.uniform(-0.03, 0.03, size=3)[:, None]
    np.clip(img, 0.0, 1.0, out=img)


def generate_synthetic(cfg: SynthConfig) -> list[SamplePair]:
    """Deterministic list of image pairs with exact change labels."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    pairs = []
    for k in range(cfg.count):
        t1 = _background(rng, h, w)
        for _ in range(cfg.static_shapes):
            _paint(t1, _shape_mask(rng, h, w, cfg.kinds), rng)
        t2 = t1.copy()
        label = np.zeros((h, w), dtype=np.uint8)
        n_changed = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        for _ in range(n_changed):
            mask = _shape_mask(rng, h, w, cfg.kinds)
            # insertion paints epoch two, removal paints epoch one
            target = t2 if rng.random() < 0.5 else t1
            _paint(target, mask, rng)
            label[mask] = 1
        t2 *= 1.0 + cfg.jitter * rng.uniform(-1.0, 1.0)
        t1 += rng.normal(0.0, cfg.noise, size=t1.shape)
        t2 += rng.normal(0.0, cfg.noise, size=t2.shape)
        np.clip(t1, 0.0, 1.0, out=t1)
        np.clip(t2, 0.0, 1.0, out=t2)
        pairs.append(SamplePair(t1.astype(np.float32), t2.astype(np.float32),
                                label, f"synth{k:04d}"))
    return pairs


# ---------------------------------------------------------------------------
# PNG I/O

def _load_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError as exc:
        raise IoError(f"cannot read image: {exc}") from exc
    return np.ascontiguousarray(np.moveaxis(arr, -1, 0)) / 255.0


def _load_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except FileNotFoundError as exc:
        raise IoError(f"cannot read label: {exc}") from exc
    return (arr > 0).astype(np.uint8)


def load_pair(path_t1, path_t2, path_label=None, id=None) -> SamplePair:
    """Read a PNG pair (+ optional label; all-zeros mask when absent)."""
    t1 = _load_rgb(path_t1)
    t2 = _load_rgb(path_t2)
    if t1.shape != t2.shape:
        raise T.ShapeError(
            f"epoch extents differ: {t1.shape} vs {t2.shape}")
    if path_label is not None:
        label = _load_mask(path_label)
        if label.shape != t1.shape[1:]:
            raise T.ShapeError(
                f"label {label.shape} does not match image {t1.shape}")
    else:
        label = np.zeros(t1.shape[1:], dtype=np.uint8)
    if id is None:
        id = os.path.splitext(os.path.basename(str(path_t1)))[0]
    return SamplePair(t1, t2, label, id)


def write_dataset(root, pairs, subdirs=DEFAULT_SUBDIRS) -> None:
    a, b, lab = (os.path.join(root, d) for d in subdirs)
    for d in (a, b, lab):
        os.makedirs(d, exist_ok=True)
    for pair in pairs:
        name = pair.id + ".png"
        save_image(pair.img_t1, os.path.join(a, name))
        save_image(pair.img_t2, os.path.join(b, name))
        save_mask(pair.label, os.path.join(lab, name))


def load_dataset(root, subdirs=DEFAULT_SUBDIRS) -> list[SamplePair]:
    """Read every id present in the first-epoch directory, sorted."""
    a, b, lab = (os.path.join(root, d) for d in subdirs)
    if not os.path.isdir(a):
        raise IoError(f"no such dataset directory: {a}")
    pairs = []
    for name in sorted(os.listdir(a)):
        if not name.endswith(".png"):
            continue
        stem = os.path.splitext(name)[0]
        label_path = os.path.join(lab, name)
        pairs.append(load_pair(
            os.path.join(a, name), os.path.join(b, name),
            label_path if os.path.exists(label_path) else None, id=stem))
    if not pairs:
        raise IoError(f"dataset directory {a} holds no PNG files")
    return pairs


# ---------------------------------------------------------------------------
# tiling

def tile(sample: SamplePair, tile_size: int, stride: int) -> list[SamplePair]:
    """Aligned square crops; remainder tiles anchor to the far border."""
    h, w = sample.label.shape
    if tile_size > h or tile_size > w:
        raise T.ShapeError(
            f"tile {tile_size} exceeds image extents {h}x{w}")
    if tile_size % 32:
        raise ValueError(f"tile size must be divisible by 32, got {tile_size}")
    if stride < 1:
        raise ValueError("stride must be positive")

    def anchors(extent):
        out = list(range(0, extent - tile_size + 1, stride))
        if out[-1] != extent - tile_size:
            out.append(extent - tile_size)
        return out

    tiles = []
    for ay in anchors(h):
        for ax in anchors(w):
            sl = np.s_[ay:ay + tile_size, ax:ax + tile_size]
            tiles.append(SamplePair(
                np.ascontiguousarray(sample.img_t1[:, sl[0], sl[1]]),
                np.ascontiguousarray(sample.img_t2[:, sl[0], sl[1]]),
                np.ascontiguousarray(sample.label[sl]),
                f"{sample.id}_y{ay}x{ax}"))
    return tiles
