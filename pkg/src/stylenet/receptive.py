"""Analytic receptive-field arithmetic for conv stacks, plus a backprop probe.

Field size and jump follow the standard recurrence
    r_l = r_{l-1} + (k_l - 1) * j_{l-1}
    j_l = j_{l-1} * s_l
with r_0 = j_0 = 1, and the first neuron's field center at
    offset_l = offset_{l-1} + ((k_l - 1)/2 - p_l) * j_{l-1}.

A stack is "disjoint" when adjacent final-layer neurons see non-overlapping
input regions, i.e. j_L >= r_L. probe_footprint backpropagates a one-hot
gradient through a real conv stack and reports the bounding box of nonzero
input gradient, serving as the independent oracle for the analytic table.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import UsageError
from .seeding import rng_for


@dataclass(frozen=True)
class LayerGeom:
    """Geometry of one conv layer: square kernel, stride, zero padding."""
    kernel: int
    stride: int
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise UsageError(f"illegal layer geometry {self}")


@dataclass(frozen=True)
class ReceptiveField:
    """Input-pixel geometry of one layer's neurons."""
    size: int
    jump: int
    offset: float


def _as_geoms(layers):
    geoms = [g if isinstance(g, LayerGeom) else LayerGeom(*g) for g in layers]
    if not geoms:
        raise UsageError("receptive field of an empty layer list")
    return geoms


def receptive_field(layers) -> list:
    """Per-layer ReceptiveField table for a stack of (kernel, stride[, pad])."""
    geoms = _as_geoms(layers)
    size, jump, offset = 1, 1, 0.0
    table = []
    for g in geoms:
        size = size + (g.kernel - 1) * jump
        offset = offset + ((g.kernel - 1) / 2 - g.padding) * jump
        jump = jump * g.stride
        table.append(ReceptiveField(size, jump, offset))
    return table


def is_disjoint(layers) -> tuple:
    """Whether adjacent final neurons have non-overlapping fields.

    Returns (disjoint, margin) with margin = jump_L - size_L.
    """
    last = receptive_field(layers)[-1]
    margin = last.jump - last.size
    return margin >= 0, margin


def output_size(layers, input_size: int) -> int:
    """Spatial extent of the final layer's output for a square input."""
    size = input_size
    for g in _as_geoms(layers):
        size = (size + 2 * g.padding - g.kernel) // g.stride + 1
        if size < 1:
            raise UsageError(
                f"stack does not fit input of size {input_size} (layer {g})")
    return size


def field_box(layers, neuron: int) -> tuple:
    """Analytic inclusive input-pixel interval seen by final neuron `neuron`."""
    last = receptive_field(layers)[-1]
    center = last.offset + neuron * last.jump
    half = (last.size - 1) / 2
    return center - half, center + half


def interior_neurons(layers, input_size: int) -> range:
    """Final-layer indices whose fields lie fully inside the input."""
    n = output_size(layers, input_size)
    lo = None
    hi = None
    for i in range(n):
        a, b = field_box(layers, i)
        if a >= 0 and b <= input_size - 1:
            if lo is None:
                lo = i
            hi = i
    if lo is None:
        return range(0)
    return range(lo, hi + 1)


@dataclass(frozen=True)
class Footprint:
    """Inclusive bounding box of nonzero input gradient."""
    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1

    @property
    def width(self) -> int:
        return self.right - self.left + 1

    def intersects(self, other: "Footprint") -> bool:
        return not (self.right < other.left or other.right < self.left or
                    self.bottom < other.top or other.bottom < self.top)


def probe_footprint(layers, neuron, input_size: int, seed: int = 0) -> Footprint:
    """Backprop probe of the input region feeding one output neuron.

    `neuron` is an (row, col) index into the final layer. The stack is built
    with strictly positive kernels and input so no relu masking can shrink
    the footprint; gradients then mark exactly the connected input pixels.
    """
    geoms = _as_geoms(layers)
    rng = rng_for(seed, "footprint-probe")
    ny, nx = (neuron, neuron) if isinstance(neuron, int) else neuron
    x = ad.Tensor(np.full((1, 1, input_size, input_size), 1.0, dtype=np.float64))
    with ad.Tape() as tape:
        feat = x
        for g in geoms:
            kernel = ad.Tensor(
                rng.uniform(0.1, 1.0, size=(1, 1, g.kernel, g.kernel)))
            feat = ad.conv2d(feat, kernel, stride=g.stride, padding=g.padding)
        mask = np.zeros(feat.shape)
        mask[0, 0, ny, nx] = 1.0
        loss = ad.total_sum(ad.mul(feat, ad.Tensor(mask)))
    tape.backward(loss)
    hit = np.abs(x.grad[0, 0]) > 0
    ys, xs = np.nonzero(hit)
    if ys.size == 0:
        raise UsageError(f"neuron {neuron} has no input footprint (all padding)")
    return Footprint(int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max()))


def format_table(layers) -> str:
    """Aligned text table of the per-layer receptive fields plus verdict."""
    geoms = _as_geoms(layers)
    table = receptive_field(geoms)
    disjoint, margin = is_disjoint(geoms)
    lines = [f"{'layer':>5}  {'kernel':>6}  {'stride':>6}  {'pad':>3}  "
             f"{'size':>5}  {'jump':>5}  {'offset':>7}"]
    for i, (g, rf) in enumerate(zip(geoms, table), start=1):
        lines.append(f"{i:>5}  {g.kernel:>6}  {g.stride:>6}  {g.padding:>3}  "
                     f"{rf.size:>5}  {rf.jump:>5}  {rf.offset:>7.1f}")
    lines.append(f"disjoint: {'yes' if disjoint else 'no'} (margin {margin})")
    return "\n".join(lines)
