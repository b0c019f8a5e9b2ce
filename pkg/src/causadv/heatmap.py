"""Causal-feature attention heatmaps and PPM export.

The heatmap weights the input's last-conv activation maps by the CI of
the predicted class's *prototype* (the class-level reference), sums the
top causal filters, clamps negatives, upsamples nearest-neighbor to the
input resolution and min-max normalizes. CAM-style, with counterfactual
information in place of learned weights.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import causal
from . import model as model_mod


class HeatmapError(Exception):
    pass


@dataclass
class Heatmap:
    grid: np.ndarray  # [H,W] in [0,1]
    source_image_id: str
    class_label: int
    top_n: int


def _upsample_nearest(grid, out_h, out_w):
    h, w = grid.shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return grid[rows[:, None], cols[None, :]]


def causal_heatmap(spec, weights, x, proto_ci, top_n, image_id="",
                   tau_zero=causal.DEFAULT_TAU_ZERO):
    """CI-weighted sum of x's activation maps for the prototype's top causal filters."""
    if top_n < 1:
        raise HeatmapError("top_n must be >= 1")
    top = causal.top_causal(proto_ci, top_n, tau_zero)
    if not top:
        raise HeatmapError("prototype CI has no causal filters; nothing to visualize")
    pred = model_mod.forward(spec, weights, x)
    acts = pred.last_conv_activations
    grid = np.zeros(acts.shape[1:], dtype=np.float64)
    for f in top:
        grid += float(proto_ci.values[f]) * acts[f]
    _, in_h, in_w = spec.input_shape
    grid = _upsample_nearest(grid, in_h, in_w)
    grid = np.maximum(grid, 0.0)
    lo, hi = grid.min(), grid.max()
    if hi == 0.0:
        grid = np.zeros_like(grid)
    elif hi == lo:
        grid = np.ones_like(grid)
    else:
        grid = (grid - lo) / (hi - lo)
    return Heatmap(grid=grid.astype(np.float32), source_image_id=image_id,
                   class_label=proto_ci.predicted_label, top_n=top_n)


def export_ppm(path, heatmap, image=None):
    """Write a binary PPM (P6).

    Heatmap alone renders into the red channel; with an image, the
    grayscale input is blended with the red heatmap at 50% alpha.
    """
    grid = np.asarray(heatmap.grid, dtype=np.float64)
    h, w = grid.shape
    if image is None:
        r = np.round(grid * 255.0)
        g = np.zeros_like(r)
        b = np.zeros_like(r)
    else:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[1:] != grid.shape:
            raise HeatmapError(f"image shape {img.shape} does not match heatmap {grid.shape}")
        gray = img.mean(axis=0) * 255.0
        r = np.round(0.5 * gray + 0.5 * grid * 255.0)
        g = np.round(0.5 * gray)
        b = g
    rgb = np.stack([r, g, b], axis=-1).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + rgb.tobytes())
    os.replace(tmp, path)


def read_ppm(path):
    """Parse a P6 file written by export_ppm; returns (width, height, rgb array)."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise HeatmapError(f"{path}: not a P6 PPM")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise HeatmapError(f"{path}: unsupported maxval {maxval}")
    payload = parts[3]
    if len(payload) != w * h * 3:
        raise HeatmapError(f"{path}: payload length {len(payload)} != {w * h * 3}")
    return w, h, np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
