"""Interpretability tools: Grad-CAM heatmaps and exact t-SNE projection.

Grad-CAM backpropagates a single class logit to a conv layer's feature maps,
weights each map by its spatially averaged gradient, and keeps the positive
part of the weighted sum. t-SNE here is the exact O(n^2) symmetric variant:
per-point bandwidths found by entropy bisection, early exaggeration, and
plain momentum gradient descent; small enough inputs make the exact form
both affordable and easy to verify.
"""

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import UsageError
from .imageops import bilinear_resize
from .models import Model
from .seeding import derive_seed


@dataclass
class Heatmap:
    values: np.ndarray        # (H, W) in [0, 1], same size as the input image
    layer: str
    class_index: int


def _normalize_map(raw: np.ndarray) -> np.ndarray:
    lo, hi = float(raw.min()), float(raw.max())
    if hi <= 0.0:
        return np.zeros_like(raw)      # all-zero map stays all-zero
    if hi - lo < 1e-12:
        return np.ones_like(raw)       # constant positive: everything matters
    return (raw - lo) / (hi - lo)


def grad_cam(model: Model, image, layer_name=None, class_index: int = 0) -> Heatmap:
    """Class-evidence heatmap for one image.

    layer_name selects a conv activation by name; None uses the model's
    default (its last conv layer, or each branch's last conv layer averaged
    for multi-patch). The map is invariant to adding a constant to all
    logits since only one logit is differentiated.
    """
    if not 0 <= class_index < model.config.num_classes:
        raise UsageError(f"class index {class_index} outside "
                         f"0..{model.config.num_classes - 1}")
    valid = model.activation_names()
    if layer_name is None:
        layers = model.default_gradcam_layers()
    else:
        if layer_name not in valid:
            raise UsageError(f"unknown layer {layer_name!r}; valid layers: "
                             f"{', '.join(valid)}")
        layers = (layer_name,)
    x = ad.as_tensor(image)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    h, w = x.shape[2], x.shape[3]
    capture = {}
    with Tape() as tape:
        logits = model.forward(x, capture=capture)
        mask = np.zeros(logits.shape, dtype=logits.dtype)
        mask[0, class_index] = 1.0
        target = ad.total_sum(ad.mul(logits, Tensor(mask)))
    tape.backward(target)

    maps = []
    for name in layers:
        act = capture[name]
        grad = act.grad
        if grad is None:
            maps.append(np.zeros((h, w)))
            continue
        weights = grad[0].mean(axis=(1, 2))                    # (C,)
        raw = np.maximum((weights[:, None, None] * act.data[0]).sum(axis=0), 0.0)
        maps.append(_normalize_map(bilinear_resize(raw, h, w)))
    combined = maps[0] if len(maps) == 1 else np.mean(maps, axis=0)
    return Heatmap(values=_normalize_map(combined),
                   layer=layers[0] if len(layers) == 1 else "+".join(layers),
                   class_index=class_index)


def overlay(image: np.ndarray, heatmap: Heatmap) -> np.ndarray:
    """Heatmap alpha-blended 0.5 onto the input; returns (3, H, W)."""
    return 0.5 * np.asarray(image) + 0.5 * heatmap.values[None, :, :]


# ---------------------------------------------------------------------------
# t-SNE


@dataclass
class Projection:
    points: np.ndarray            # (n, 2)
    kl: float
    kl_after_exaggeration: float
    perplexity: float


def _squared_distances(x: np.ndarray) -> np.ndarray:
    s = (x * x).sum(axis=1)
    d2 = s[:, None] + s[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def _conditional_probs(d2: np.ndarray, perplexity: float,
                       tol: float = 1e-5, max_steps: int = 50) -> np.ndarray:
    """Row-wise Gaussian affinities with bandwidth matching the perplexity."""
    n = d2.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        row = np.delete(d2[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_steps):
            e = np.exp(-row * beta)
            total = e.sum()
            if total <= 0:
                entropy = 0.0
                probs = np.zeros_like(row)
            else:
                probs = e / total
                entropy = np.log(total) + beta * (row * probs).sum()
            diff = entropy - target
            if abs(diff) <= tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        p[i, np.arange(n) != i] = probs
    return p


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def _point_seed(seed: int, vector: np.ndarray) -> int:
    # initialization keyed to the point's content, so permuting the input
    # rows permutes the whole trajectory with them
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little", signed=True))
    h.update(np.ascontiguousarray(vector, dtype=np.float64).tobytes())
    return int.from_bytes(h.digest(), "little")


def tsne(vectors, perplexity: float = 30.0, iterations: int = 1000,
         seed: int = 0, learning_rate: float = None) -> Projection:
    """Exact symmetric t-SNE of (n, d) vectors into 2-D.

    Early exaggeration multiplies affinities by 12 for the first 250
    iterations; momentum switches 0.5 -> 0.8 at iteration 250. The default
    learning rate is the usual max(n / (4 * 12), 50); much larger values
    destabilize the descent. Deterministic for a fixed seed. Identical input
    points (zero spread) skip optimization and return the seeded initial
    Gaussian with a warning.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise UsageError(f"tsne expects (n, d) vectors, got shape {x.shape}")
    n = x.shape[0]
    if n < 5:
        raise UsageError(f"tsne needs at least 5 points, got {n}")
    if not perplexity < n / 3:
        raise UsageError(f"perplexity {perplexity} must be < n/3 = {n / 3:.1f}")
    if iterations < 1:
        raise UsageError("iterations must be >= 1")
    if learning_rate is None:
        learning_rate = max(n / 48.0, 50.0)

    d2 = _squared_distances(x)
    if d2.max() <= 0.0:
        warnings.warn("t-SNE input is degenerate (all points identical); "
                      "returning the seeded initial Gaussian")
        rng_pts = np.stack([
            np.random.default_rng(derive_seed(seed, "tsne-degenerate", i))
            .normal(0.0, 1e-4, size=2) for i in range(n)])
        return Projection(rng_pts, 0.0, 0.0, perplexity)

    cond = _conditional_probs(d2, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)

    y = np.stack([np.random.default_rng(_point_seed(seed, x[i]))
                  .normal(0.0, 1e-4, size=2) for i in range(n)])
    velocity = np.zeros_like(y)
    exagg_end = min(250, iterations)
    kl_after_exaggeration = None

    for it in range(iterations):
        pe = p * 12.0 if it < exagg_end else p
        num = 1.0 / (1.0 + _squared_distances(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        wmat = (pe - q) * num
        grad = 4.0 * (wmat.sum(axis=1)[:, None] * y - wmat @ y)
        momentum = 0.5 if it < 250 else 0.8
        velocity = momentum * velocity - learning_rate * grad
        y = y + velocity
        y = y - y.mean(axis=0)
        if it == exagg_end - 1:
            num = 1.0 / (1.0 + _squared_distances(y))
            np.fill_diagonal(num, 0.0)
            kl_after_exaggeration = _kl(p, np.maximum(num / num.sum(), 1e-12))

    num = 1.0 / (1.0 + _squared_distances(y))
    np.fill_diagonal(num, 0.0)
    final_kl = _kl(p, np.maximum(num / num.sum(), 1e-12))
    return Projection(y, final_kl, float(kl_after_exaggeration), perplexity)


def format_projection(projection: Projection, labels, paths) -> str:
    """Text rows `x,y,label,path`, one per projected point."""
    lines = []
    for (px, py), label, path in zip(projection.points, labels, paths):
        lines.append(f"{float(px)!r},{float(py)!r},{int(label)},{path}")
    return "\n".join(lines) + "\n"
