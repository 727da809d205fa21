"""Small raster helpers shared by the dataset generator and interpretability tools."""

import numpy as np


def box_blur(image: np.ndarray, radius: int) -> np.ndarray:
    """Mean filter with a (2r+1)^2 box, replicated edges. image: (C, H, W)."""
    if radius < 1:
        return image.copy()
    k = 2 * radius + 1
    padded = np.pad(image, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    return win.mean(axis=(-1, -2))


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of (C, H, W) or (H, W) to the target size."""
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    c, h, w = image.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = image[:, y0[:, None], x0] * (1 - wx) + image[:, y0[:, None], x1] * wx
    bot = image[:, y1[:, None], x0] * (1 - wx) + image[:, y1[:, None], x1] * wx
    out = top * (1 - wy) + bot * wy
    return out[0] if squeeze else out
