"""PNG emission: change masks, error overlays, and flow field rendering."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .tensor import Tensor


class IoError(OSError):
    """Raised when an output image cannot be written."""


def _to_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _write(img: Image.Image, path) -> None:
    try:
        img.save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def save_mask(labels, path) -> None:
    """Binary mask as an 8-bit PNG: change = 255, background = 0."""
    arr = (_to_array(labels) > 0).astype(np.uint8) * 255
    _write(Image.fromarray(arr, mode="L"), path)


def save_overlay(pred, truth, path) -> None:
    """Agreement overlay: hits white, correct rejections black,
    false alarms red, misses blue."""
    p = _to_array(pred) > 0
    t = _to_array(truth) > 0
    rgb = np.zeros(p.shape + (3,), dtype=np.uint8)
    rgb[p & t] = (255, 255, 255)
    rgb[p & ~t] = (255, 0, 0)
    rgb[~p & t] = (0, 0, 255)
    _write(Image.fromarray(rgb, mode="RGB"), path)


def save_image(channels_first, path) -> None:
    """(3,H,W) float in [0,1] -> RGB PNG."""
    arr = np.clip(_to_array(channels_first), 0.0, 1.0)
    rgb = (np.moveaxis(arr, 0, -1) * 255).astype(np.uint8)
    _write(Image.fromarray(rgb, mode="RGB"), path)


def _hsv_to_rgb(hue, sat, val):
    """Vectorized hue/saturation/value to RGB, all arrays in [0,1]."""
    k = (hue * 6.0) % 6.0
    f = k - np.floor(k)
    p = val * (1.0 - sat)
    q = val * (1.0 - sat * f)
    t = val * (1.0 - sat * (1.0 - f))
    sector = np.floor(k).astype(int) % 6
    r = np.choose(sector, [val, q, p, p, t, val])
    g = np.choose(sector, [t, val, val, q, p, p])
    b = np.choose(sector, [p, p, t, val, val, q])
    return r, g, b


def emit_flow_visualization(flow, path) -> None:
    """Render a displacement field: hue = direction, brightness = speed.

    Zero flow gives a uniformly black image; a constant field gives one
    uniform color.
    """
    arr = _to_array(flow)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {arr.shape}")
    dx, dy = arr[..., 0].astype(np.float64), arr[..., 1].astype(np.float64)
    mag = np.hypot(dx, dy)
    ang = np.arctan2(dy, dx)
    hue = (ang / (2.0 * np.pi)) % 1.0
    peak = mag.max()
    val = mag / peak if peak > 0 else np.zeros_like(mag)
    r, g, b = _hsv_to_rgb(hue, np.ones_like(val), val)
    rgb = (np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)
    _write(Image.fromarray(rgb, mode="RGB"), path)
