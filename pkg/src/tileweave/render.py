"""Composite rendering of aligned tiles.

Tiles land on a canvas sized to the exact bounding box of their placements.
Fractional offsets are handled by bilinear resampling (integer offsets
reproduce source pixels exactly). Two blend modes: "overwrite" paints tiles
in id order, "feather" averages with edge-ramp weights so seams fade over a
margin.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import shift as nd_shift

from .errors import StitchError
from .images import _scale_for_dtype

log = logging.getLogger(__name__)

BLEND_MODES = ("overwrite", "feather")
MASK_EPS = 1e-6


def _as_channels(arr: np.ndarray) -> np.ndarray:
    """Any tile array to float (H, W, C) in [0, 1]."""
    arr = np.asarray(arr)
    scale = _scale_for_dtype(arr)
    arr = arr.astype(np.float64) / scale
    if arr.ndim == 2:
        return arr[:, :, None]
    if arr.ndim == 3 and arr.shape[2] in (1, 3, 4):
        return arr[:, :, :3] if arr.shape[2] == 4 else arr
    raise ValueError(f"unsupported tile shape {arr.shape}")


def _feather_weights(h: int, w: int, margin: int) -> np.ndarray:
    """Edge-distance ramp, 1 in the interior, falling to 1/margin at the rim."""
    ramp_y = np.minimum(np.arange(h) + 1, np.arange(h)[::-1] + 1)
    ramp_x = np.minimum(np.arange(w) + 1, np.arange(w)[::-1] + 1)
    wy = np.minimum(ramp_y / margin, 1.0)
    wx = np.minimum(ramp_x / margin, 1.0)
    return np.minimum(wy[:, None], wx[None, :])


def render(
    tiles: list[np.ndarray],
    offsets: np.ndarray,
    blend: str = "overwrite",
    margin: int = 16,
) -> np.ndarray:
    """Composite tiles at offsets; returns float (H, W) or (H, W, 3) in [0, 1].

    The canvas covers exactly the bounding box of all placed tiles. Unfilled
    canvas is 0. Offsets are (x, y) positions of each tile's origin.
    """
    if len(tiles) == 0:
        raise StitchError("nothing to render: empty tile list")
    offsets = np.asarray(offsets, dtype=float).reshape(-1, 2)
    if len(offsets) != len(tiles):
        raise StitchError(
            f"offsets for {len(offsets)} tiles but {len(tiles)} images given"
        )
    if blend not in BLEND_MODES:
        raise StitchError(f"unknown blend mode {blend!r}")
    if margin < 1:
        raise StitchError("feather margin must be >= 1")

    chans = [_as_channels(t) for t in tiles]
    n_c = max(c.shape[2] for c in chans)
    chans = [
        np.repeat(c, 3, axis=2) if c.shape[2] == 1 and n_c == 3 else c for c in chans
    ]

    x0 = math.floor(min(offsets[:, 0]))
    y0 = math.floor(min(offsets[:, 1]))
    x1 = math.ceil(max(offsets[t, 0] + chans[t].shape[1] for t in range(len(tiles))))
    y1 = math.ceil(max(offsets[t, 1] + chans[t].shape[0] for t in range(len(tiles))))
    H, W = y1 - y0, x1 - x0

    acc = np.zeros((H, W, n_c))
    wsum = np.zeros((H, W))

    for t, tile in enumerate(chans):
        th, tw = tile.shape[:2]
        px = offsets[t, 0] - x0
        py = offsets[t, 1] - y0
        ix, iy = math.floor(px), math.floor(py)
        fx, fy = px - ix, py - iy
        pad_x = 1 if fx > 0 else 0
        pad_y = 1 if fy > 0 else 0

        if blend == "feather":
            weight = _feather_weights(th, tw, margin)
        else:
            weight = np.ones((th, tw))
        padded_w = np.pad(weight, ((0, pad_y), (0, pad_x)))
        padded_t = np.pad(tile, ((0, pad_y), (0, pad_x), (0, 0)))

        if pad_x or pad_y:
            sw = nd_shift(padded_w, (fy, fx), order=1, cval=0.0)
            st = np.stack(
                [
                    nd_shift(padded_t[:, :, c] * padded_w, (fy, fx), order=1, cval=0.0)
                    for c in range(n_c)
                ],
                axis=2,
            )
        else:
            sw = padded_w
            st = padded_t * padded_w[:, :, None]

        ys = slice(iy, iy + th + pad_y)
        xs = slice(ix, ix + tw + pad_x)
        if blend == "overwrite":
            solid = sw > 0.5
            vals = st / np.maximum(sw, MASK_EPS)[:, :, None]
            region_a = acc[ys, xs]
            region_w = wsum[ys, xs]
            region_a[solid] = vals[solid]
            region_w[solid] = 1.0
            # fuzzy rim only fills canvas that nothing solid has claimed
            rim = (~solid) & (sw > MASK_EPS) & (region_w < MASK_EPS)
            region_a[rim] = vals[rim]
            region_w[rim] = 1.0
        else:
            acc[ys, xs] += st
            wsum[ys, xs] += sw

    if blend == "feather":
        out = acc / np.maximum(wsum, MASK_EPS)[:, :, None]
        out[wsum <= MASK_EPS] = 0.0
    else:
        out = acc
    out = np.clip(out, 0.0, 1.0)
    return out[:, :, 0] if n_c == 1 else out


def save_png(image: np.ndarray, path: str | Path):
    """Write a float [0, 1] composite as 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(Path(path))
