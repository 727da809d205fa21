"""Dataset loading and the procedural style-transform generator.

Datasets live on disk as one directory per class of binary PPM (P6, maxval
255) images. The generator draws the same kind of content for every class --
light-gray rectangles, disks, and line segments on a mid-gray background --
and then applies exactly one class-specific appearance transform, so a
classifier that succeeds on this corpus is reading appearance, not layout.
Fog and snow both whiten, rain and fog both blur; the classes are separable
but deliberately confusable.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .imageops import bilinear_resize, box_blur

CLASS_NAMES = ("fog", "rain", "snow", "sun")


# ---------------------------------------------------------------------------
# PPM (P6) reading and writing


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a (3, H, W) float32 array scaled to [0, 1].

    Only P6 with maxval 255 is accepted; anything else is a DataError.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None

    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            ch = raw[pos:pos + 1]
            if ch == b"#":
                nl = raw.find(b"\n", pos)
                pos = len(raw) if nl < 0 else nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        return raw[start:pos]

    if token() != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise DataError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise DataError(f"{path}: PPM maxval {maxval} unsupported (must be 255)")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    pixels = raw[pos:pos + expected]
    if len(pixels) != expected:
        raise DataError(f"{path}: PPM pixel data truncated "
                        f"({len(pixels)} of {expected} bytes)")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) array (floats in [0, 1] or uint8) as binary PPM."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"write_ppm expects (3, H, W), got {image.shape}")
    if image.dtype == np.uint8:
        data = image
    else:
        data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# dataset container


@dataclass
class Dataset:
    """Loaded images with labels; item order is deterministic (sorted paths)."""

    images: np.ndarray          # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray          # (N,) int64
    paths: list
    class_names: tuple

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return len(self.class_names)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx],
                       [self.paths[i] for i in idx], self.class_names)

    def split(self, fractions, seed: int) -> tuple:
        """Split by seeded shuffle into len(fractions)+1 parts.

        fractions are the leading parts' shares; the remainder forms the
        last part, e.g. (0.7, 0.15) -> 70/15/15.
        """
        n = len(self)
        order = np.random.default_rng(seed).permutation(n)
        counts = [int(round(f * n)) for f in fractions]
        out, start = [], 0
        for c in counts:
            out.append(self.subset(order[start:start + c]))
            start += c
        out.append(self.subset(order[start:]))
        return tuple(out)


def load_dataset(root, resize=None) -> Dataset:
    """Load a directory-per-class tree of PPM images.

    Class order is the sorted subdirectory names; items are ordered by
    sorted path. All images must share one size unless `resize` is given,
    in which case every image is bilinearly resized to (resize, resize).
    """
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root} is not a directory")
    class_names = sorted(d for d in os.listdir(root)
                         if os.path.isdir(os.path.join(root, d)))
    if not class_names:
        raise DataError(f"dataset root {root} has no class subdirectories")
    images, labels, paths = [], [], []
    shape = None
    for label, name in enumerate(class_names):
        class_dir = os.path.join(root, name)
        files = sorted(f for f in os.listdir(class_dir)
                       if os.path.isfile(os.path.join(class_dir, f)))
        if not files:
            raise DataError(f"class directory {class_dir} is empty")
        for fname in files:
            path = os.path.join(class_dir, fname)
            img = read_ppm(path)
            if resize is not None:
                img = bilinear_resize(img, resize, resize).astype(np.float32)
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise DataError(f"{path}: image size {img.shape[1:]} differs from "
                                f"{shape[1:]}; pass resize= to unify")
            images.append(img)
            labels.append(label)
            paths.append(path)
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64),
                   paths, tuple(class_names))


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class StyleParams:
    """Per-class appearance transform parameters."""

    sun_contrast: float = 1.3
    sun_brightness: float = 0.15
    sun_red_shift: float = 0.08
    fog_keep: float = 0.4
    fog_radius: int = 2
    rain_dim: float = 0.8
    rain_streaks: tuple = (40, 80)
    rain_angle_deg: tuple = (70.0, 80.0)
    rain_gain: float = 0.25
    rain_blur: int = 1
    snow_brightness: float = 0.1
    snow_radius: tuple = (1.0, 2.0)
    snow_value: tuple = (0.95, 1.0)
    snow_cover: float = 0.05


@dataclass(frozen=True)
class SynthConfig:
    per_class: int
    size: int = 64
    shapes_min: int = 3
    shapes_max: int = 6
    seed: int = 0
    paired: bool = False
    style: StyleParams = field(default_factory=StyleParams)

    def validate(self):
        if self.per_class < 1:
            raise ConfigError(f"per_class must be >= 1, got {self.per_class}")
        if self.size < 16:
            raise ConfigError(f"image size must be >= 16, got {self.size}")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ConfigError(f"bad shapes range {self.shapes_min}..{self.shapes_max}")
        return self


def _draw_rect(img, rng, value):
    _, h, w = img.shape
    x0, y0 = rng.integers(0, w - 4), rng.integers(0, h - 4)
    x1 = x0 + int(rng.integers(3, max(4, w // 3)))
    y1 = y0 + int(rng.integers(3, max(4, h // 3)))
    img[:, y0:min(y1, h), x0:min(x1, w)] = value


def _draw_disk(img, rng, value):
    _, h, w = img.shape
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    r = rng.uniform(2.5, max(3.0, h / 5))
    yy, xx = np.ogrid[:h, :w]
    img[:, ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r] = value


def _add_segment(img, p0, p1, gain, thickness: float = 1.0):
    """Brighten an anti-aliased segment: +gain in the core, soft 1px edge."""
    _, h, w = img.shape
    (y0, x0), (y1, x1) = p0, p1
    lo_y = max(0, int(np.floor(min(y0, y1) - thickness - 1)))
    hi_y = min(h, int(np.ceil(max(y0, y1) + thickness + 2)))
    lo_x = max(0, int(np.floor(min(x0, x1) - thickness - 1)))
    hi_x = min(w, int(np.ceil(max(x0, x1) + thickness + 2)))
    if lo_y >= hi_y or lo_x >= hi_x:
        return
    yy, xx = np.mgrid[lo_y:hi_y, lo_x:hi_x]
    dy, dx = y1 - y0, x1 - x0
    length2 = dy * dy + dx * dx
    if length2 == 0:
        dist = np.hypot(yy - y0, xx - x0)
    else:
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / length2, 0.0, 1.0)
        dist = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
    coverage = np.clip(thickness - dist, 0.0, 1.0)
    img[:, lo_y:hi_y, lo_x:hi_x] += gain * coverage


def _draw_line_shape(img, rng, value):
    _, h, w = img.shape
    p0 = (rng.uniform(0, h), rng.uniform(0, w))
    p1 = (rng.uniform(0, h), rng.uniform(0, w))
    coverage = np.zeros((1, h, w), dtype=img.dtype)
    _add_segment(coverage, p0, p1, 1.0, thickness=1.5)
    alpha = np.clip(coverage[0], 0.0, 1.0)
    img[:] = img * (1 - alpha) + value * alpha


def render_content(rng: np.random.Generator, size: int,
                   shapes_min: int = 3, shapes_max: int = 6) -> np.ndarray:
    """Shared content distribution: light-gray shapes on mid-gray ground."""
    img = np.full((3, size, size), 0.5, dtype=np.float64)
    n_shapes = int(rng.integers(shapes_min, shapes_max + 1))
    for _ in range(n_shapes):
        kind = int(rng.integers(0, 3))
        value = rng.uniform(0.6, 0.85)
        if kind == 0:
            _draw_rect(img, rng, value)
        elif kind == 1:
            _draw_disk(img, rng, value)
        else:
            _draw_line_shape(img, rng, value)
    return img


def _style_sun(img, rng, p: StyleParams):
    out = np.clip(p.sun_contrast * (img - 0.5) + 0.5 + p.sun_brightness, 0.0, 1.0)
    out[0] += p.sun_red_shift
    return np.clip(out, 0.0, 1.0)


def _style_fog(img, rng, p: StyleParams):
    return np.clip(p.fog_keep * box_blur(img, p.fog_radius)
                   + (1.0 - p.fog_keep) * 1.0, 0.0, 1.0)


def _style_rain(img, rng, p: StyleParams):
    out = img * p.rain_dim
    _, h, w = out.shape
    n = int(rng.integers(p.rain_streaks[0], p.rain_streaks[1] + 1))
    for _ in range(n):
        angle = np.deg2rad(rng.uniform(*p.rain_angle_deg))
        length = rng.uniform(6.0, 14.0)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        dy, dx = np.sin(angle) * length / 2, np.cos(angle) * length / 2
        _add_segment(out, (cy - dy, cx - dx), (cy + dy, cx + dx), p.rain_gain)
    return np.clip(box_blur(out, p.rain_blur), 0.0, 1.0)


def _style_snow(img, rng, p: StyleParams):
    out = img + p.snow_brightness
    _, h, w = out.shape
    target = p.snow_cover * h * w
    painted = np.zeros((h, w), dtype=bool)
    yy, xx = np.ogrid[:h, :w]
    while painted.sum() < target:
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(*p.snow_radius)
        value = rng.uniform(*p.snow_value)
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
        out[:, mask] = value
        painted |= mask
    return np.clip(out, 0.0, 1.0)


_STYLES = {"sun": _style_sun, "fog": _style_fog, "rain": _style_rain,
           "snow": _style_snow}


def apply_style(content: np.ndarray, class_name: str,
                rng: np.random.Generator, params: StyleParams = StyleParams(),
                quadrant=None) -> np.ndarray:
    """Apply one class transform; optionally confine it to one quadrant.

    quadrant: None for the whole image, else 0..3 = TL, TR, BL, BR -- the
    rest of the image keeps the untransformed content (used to localize
    class evidence for Grad-CAM tests).
    """
    if class_name not in _STYLES:
        raise ConfigError(f"unknown class {class_name!r}; expected one of {CLASS_NAMES}")
    styled = _STYLES[class_name](content, rng, params)
    if quadrant is None:
        return styled
    if quadrant not in (0, 1, 2, 3):
        raise ConfigError(f"quadrant must be 0..3, got {quadrant}")
    _, h, w = content.shape
    out = content.copy()
    ys = slice(0, h // 2) if quadrant in (0, 1) else slice(h // 2, h)
    xs = slice(0, w // 2) if quadrant in (0, 2) else slice(w // 2, w)
    out[:, ys, xs] = styled[:, ys, xs]
    return np.clip(out, 0.0, 1.0)


def synth_image(cfg: SynthConfig, class_name: str, i: int,
                quadrant=None) -> np.ndarray:
    """One generated image, deterministic in (seed, class, index).

    Per-image generators are derived by seed XOR image-index, so parallel
    and serial generation produce identical bytes. Paired mode shares the
    content stream across the four classes of index i (identical shape
    layout, different appearance).
    """
    c = CLASS_NAMES.index(class_name)
    if cfg.paired:
        content_rng = np.random.default_rng(cfg.seed ^ i)
        rng = np.random.default_rng(
            (cfg.seed ^ i) ^ ((c + 1) * 0x9E3779B97F4A7C15 & 0x7FFFFFFFFFFFFFFF))
    else:
        rng = content_rng = np.random.default_rng(
            cfg.seed ^ (c * cfg.per_class + i))
    content = render_content(content_rng, cfg.size, cfg.shapes_min, cfg.shapes_max)
    return apply_style(content, class_name, rng, cfg.style, quadrant=quadrant)


def generate(cfg: SynthConfig, out_dir) -> Dataset:
    """Write the synthetic corpus to out_dir and return it loaded.

    Layout: out_dir/<class>/<index>.ppm, PPM P6 maxval 255. The whole corpus
    is a deterministic function of the config.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    for c, name in enumerate(CLASS_NAMES):
        class_dir = os.path.join(out_dir, name)
        os.makedirs(class_dir, exist_ok=True)
        for i in range(cfg.per_class):
            write_ppm(os.path.join(class_dir, f"{i:05d}.ppm"),
                      _generate_one(cfg, c, i))
    return load_dataset(out_dir)


def _generate_one(cfg: SynthConfig, class_index: int, i: int) -> np.ndarray:
    return synth_image(cfg, CLASS_NAMES[class_index], i)
