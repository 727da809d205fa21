"""The three style-classification architectures.

All variants share a small residual backbone: a 3x3 stem conv (stride 2)
followed by basic blocks (two 3x3 convs, instance norm, relu, additive skip;
1x1 stride-2 projection where width or resolution changes), two blocks per
stage. Conv layers are counted stem=1 and two per block; `truncation` keeps
the first N of them, and an even truncation keeps a block's first conv as a
plain conv/norm/relu layer without the skip.

- truncated-resnet: truncated backbone, global average pool, linear head.
- gram-attention: per-layer Gram matrices of the truncated backbone's
  activations, upper-triangle flattened, projected to a shared embedding
  width, pooled by additive attention, then a 2-layer MLP head.
- multi-patch: three independent conv branches with disjoint final
  receptive fields (patch sizes grow with branch depth); each ends in a
  per-class score map whose spatial mean is that branch's logit vector,
  and the final logits are the mean over branches.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, UsageError
from .receptive import LayerGeom, is_disjoint, receptive_field
from .seeding import rng_for

VARIANTS = ("truncated-resnet", "gram-attention", "multi-patch")

BLOCKS_PER_STAGE = 2

DEFAULT_BRANCHES = (
    ((2, 2, 8), (2, 2, 16)),
    ((2, 2, 8), (2, 2, 16), (2, 2, 32)),
    ((2, 2, 8), (2, 2, 16), (2, 2, 32), (2, 2, 64)),
)


@dataclass(frozen=True)
class ArchConfig:
    """Complete description of one architecture instance."""

    variant: str
    stem_width: int = 16
    stage_widths: tuple = (16, 32, 64, 128)
    truncation: int = 9
    gram_layers: tuple = ()          # () = every retained conv layer
    embed_dim: int = 64
    branch_configs: tuple = DEFAULT_BRANCHES
    num_classes: int = 4
    seed: int = 0

    def max_truncation(self) -> int:
        return 1 + 2 * BLOCKS_PER_STAGE * len(self.stage_widths)

    def conv_layer_names(self) -> tuple:
        """Names of the retained backbone conv layers, in order."""
        return tuple(f"conv{i}" for i in range(1, self.truncation + 1))

    def gram_layer_names(self) -> tuple:
        return self.gram_layers if self.gram_layers else self.conv_layer_names()

    def validate(self) -> "ArchConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.stem_width < 1 or any(w < 1 for w in self.stage_widths):
            raise ConfigError(f"widths must be positive: stem {self.stem_width}, "
                              f"stages {self.stage_widths}")
        if not 1 <= self.truncation <= self.max_truncation():
            raise ConfigError(f"truncation {self.truncation} outside 1..{self.max_truncation()} "
                              f"for {len(self.stage_widths)} stages")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be positive, got {self.embed_dim}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        retained = set(self.conv_layer_names())
        for name in self.gram_layers:
            if name not in retained:
                raise ConfigError(f"gram layer {name!r} is not a retained conv layer "
                                  f"(truncation {self.truncation})")
        if self.variant == "multi-patch":
            if len(self.branch_configs) != 3:
                raise ConfigError(f"multi-patch needs exactly 3 branch configs, "
                                  f"got {len(self.branch_configs)}")
            for bi, branch in enumerate(self.branch_configs):
                if not branch:
                    raise ConfigError(f"branch {bi + 1} is empty")
                for (k, s, c) in branch:
                    if k < 1 or s < 1 or c < 1:
                        raise ConfigError(f"branch {bi + 1} has illegal layer "
                                          f"(kernel {k}, stride {s}, channels {c})")
        return self


def canonical_config_text(cfg: ArchConfig) -> str:
    """Canonical key=value serialization: one key per line, sorted keys."""
    branches = ";".join(
        "+".join(f"{k}x{s}x{c}" for (k, s, c) in branch)
        for branch in cfg.branch_configs)
    pairs = {
        "branch_configs": branches,
        "embed_dim": str(cfg.embed_dim),
        "gram_layers": ",".join(cfg.gram_layers),
        "num_classes": str(cfg.num_classes),
        "seed": str(cfg.seed),
        "stage_widths": ",".join(str(w) for w in cfg.stage_widths),
        "stem_width": str(cfg.stem_width),
        "truncation": str(cfg.truncation),
        "variant": cfg.variant,
    }
    return "\n".join(f"{k}={pairs[k]}" for k in sorted(pairs)) + "\n"


def parse_config_text(text: str) -> ArchConfig:
    """Inverse of canonical_config_text."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno} is not key=value: {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    if "variant" not in values:
        raise ConfigError("config text is missing the variant key")
    known = {"branch_configs", "embed_dim", "gram_layers", "num_classes", "seed",
             "stage_widths", "stem_width", "truncation", "variant"}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def ints(csv):
        return tuple(int(v) for v in csv.split(",") if v)

    kwargs = {"variant": values["variant"]}
    if "stem_width" in values:
        kwargs["stem_width"] = int(values["stem_width"])
    if "stage_widths" in values:
        kwargs["stage_widths"] = ints(values["stage_widths"])
    if "truncation" in values:
        kwargs["truncation"] = int(values["truncation"])
    if "gram_layers" in values:
        kwargs["gram_layers"] = tuple(v for v in values["gram_layers"].split(",") if v)
    if "embed_dim" in values:
        kwargs["embed_dim"] = int(values["embed_dim"])
    if "num_classes" in values:
        kwargs["num_classes"] = int(values["num_classes"])
    if "seed" in values:
        kwargs["seed"] = int(values["seed"])
    if "branch_configs" in values and values["branch_configs"]:
        branches = []
        for branch_text in values["branch_configs"].split(";"):
            layers = []
            for layer in branch_text.split("+"):
                parts = layer.split("x")
                if len(parts) != 3:
                    raise ConfigError(f"bad branch layer {layer!r} (want KxSxC)")
                layers.append(tuple(int(p) for p in parts))
            branches.append(tuple(layers))
        kwargs["branch_configs"] = tuple(branches)
    return ArchConfig(**kwargs).validate()


def gram(features) -> Tensor:
    """Normalized Gram matrix of feature maps: pairwise channel dot products.

    features: (C, H, W) or batched (N, C, H, W). Returns (C, C) or (N, C, C)
    with G[i][j] = sum_hw F[i]*F[j] / (C*H*W). Symmetric, positive
    semidefinite, and differentiable (participates in backward).
    """
    features = ad.as_tensor(features)
    if features.ndim not in (3, 4):
        raise UsageError(f"gram expects (C, H, W) or (N, C, H, W), got {features.shape}")
    if features.size == 0:
        raise UsageError("gram of an empty tensor")
    squeeze = features.ndim == 3
    if squeeze:
        features = ad.reshape(features, (1,) + features.shape)
    n, c, h, w = features.shape
    flat = ad.reshape(features, (n, c, h * w))
    g = ad.mul(ad.matmul(flat, ad.swap_last_axes(flat)), 1.0 / (c * h * w))
    return ad.reshape(g, (c, c)) if squeeze else g


# ---------------------------------------------------------------------------
# parameter construction


def _uniform(rng, shape, fan_in):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class _ParamBuilder:
    def __init__(self, seed):
        self.seed = seed
        self.params = {}

    def conv(self, name, cout, cin, k):
        rng = rng_for(self.seed, "init", name)
        self.params[name] = Tensor(_uniform(rng, (cout, cin, k, k), cin * k * k))

    def norm(self, name, c):
        self.params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=np.float32))
        self.params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=np.float32))

    def linear(self, name, n_in, n_out):
        rng = rng_for(self.seed, "init", name)
        self.params[f"{name}.weight"] = Tensor(_uniform(rng, (n_in, n_out), n_in))
        self.params[f"{name}.bias"] = Tensor(np.zeros(n_out, dtype=np.float32))

    def vector(self, name, n):
        rng = rng_for(self.seed, "init", name)
        self.params[name] = Tensor(_uniform(rng, (n, 1), n))


def _backbone_layout(cfg: ArchConfig):
    """Per-block layout of the truncated backbone.

    Yields (block_index, in_width, out_width, stride, keep_second_conv).
    """
    full_blocks, half = divmod(cfg.truncation - 1, 2)
    width = cfg.stem_width
    layout = []
    for b in range(full_blocks + half):
        stage = b // BLOCKS_PER_STAGE
        out_width = cfg.stage_widths[stage]
        stride = 2 if (stage > 0 and b % BLOCKS_PER_STAGE == 0) else 1
        layout.append((b + 1, width, out_width, stride, b < full_blocks))
        width = out_width
    return layout, width


def _build_backbone_params(cfg: ArchConfig, pb: _ParamBuilder):
    pb.conv("stem.weight", cfg.stem_width, 3, 3)
    pb.norm("stem.norm", cfg.stem_width)
    layout, final_width = _backbone_layout(cfg)
    for (b, cin, cout, stride, full) in layout:
        pb.conv(f"block{b}.conv1.weight", cout, cin, 3)
        pb.norm(f"block{b}.norm1", cout)
        if full:
            pb.conv(f"block{b}.conv2.weight", cout, cout, 3)
            pb.norm(f"block{b}.norm2", cout)
            if stride != 1 or cin != cout:
                pb.conv(f"block{b}.proj.weight", cout, cin, 1)
                pb.norm(f"block{b}.proj.norm", cout)
    return final_width


def _forward_backbone(params, cfg: ArchConfig, x: Tensor, acts: dict) -> Tensor:
    def conv_norm(h, conv_name, norm_name, stride, padding):
        h = ad.conv2d(h, params[conv_name], stride=stride, padding=padding)
        return ad.instance_norm(h, params[f"{norm_name}.gamma"],
                                params[f"{norm_name}.beta"])

    a = ad.relu(conv_norm(x, "stem.weight", "stem.norm", 2, 1))
    acts["conv1"] = a
    idx = 2
    layout, _ = _backbone_layout(cfg)
    for (b, cin, cout, stride, full) in layout:
        h = ad.relu(conv_norm(a, f"block{b}.conv1.weight", f"block{b}.norm1",
                              stride, 1))
        acts[f"conv{idx}"] = h
        idx += 1
        if not full:
            a = h
            break
        h = conv_norm(h, f"block{b}.conv2.weight", f"block{b}.norm2", 1, 1)
        if f"block{b}.proj.weight" in params:
            skip = conv_norm(a, f"block{b}.proj.weight", f"block{b}.proj.norm",
                             stride, 0)
        else:
            skip = a
        a = ad.relu(ad.add(h, skip))
        acts[f"conv{idx}"] = a
        idx += 1
    return a


# ---------------------------------------------------------------------------
# model variants


class Model:
    """A built architecture: named parameters plus a forward function."""

    def __init__(self, config: ArchConfig, params: dict):
        self.config = config
        self.params = params

    def forward(self, x, capture: dict = None) -> Tensor:
        """Image batch (N, 3, H, W) -> logits (N, num_classes).

        When `capture` is a dict it is filled with the named activation
        tensors (conv layer outputs after their relu).
        """
        raise NotImplementedError

    def embed(self, x) -> Tensor:
        """The vector feeding the final classifier layer."""
        raise NotImplementedError

    def activation_names(self) -> tuple:
        raise NotImplementedError

    def default_gradcam_layers(self) -> tuple:
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "Model":
        clone = type(self)(self.config)
        for name in clone.params:
            clone.params[name] = Tensor(self.params[name].data.astype(dtype))
        return clone

    def _check_input(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected image batch (N, 3, H, W), got {x.shape}")
        return x


class TruncatedResNet(Model):
    def __init__(self, config: ArchConfig):
        pb = _ParamBuilder(config.seed)
        self.feature_width = _build_backbone_params(config, pb)
        pb.linear("head", self.feature_width, config.num_classes)
        super().__init__(config, pb.params)

    def forward(self, x, capture=None):
        x = self._check_input(x)
        acts = {} if capture is None else capture
        feat = _forward_backbone(self.params, self.config, x, acts)
        pooled = ad.spatial_mean(feat)
        return ad.linear(pooled, self.params["head.weight"], self.params["head.bias"])

    def embed(self, x):
        x = self._check_input(x)
        return ad.spatial_mean(_forward_backbone(self.params, self.config, x, {}))

    def activation_names(self):
        return self.config.conv_layer_names()

    def default_gradcam_layers(self):
        return (f"conv{self.config.truncation}",)


class GramAttention(Model):
    def __init__(self, config: ArchConfig):
        pb = _ParamBuilder(config.seed)
        _build_backbone_params(config, pb)
        d = config.embed_dim
        widths = _layer_widths(config)
        for name in config.gram_layer_names():
            c = widths[name]
            pb.linear(f"gram.{name}", c * (c + 1) // 2, d)
        rng = rng_for(config.seed, "init", "att.weight")
        pb.params["att.weight"] = Tensor(_uniform(rng, (d, d), d))
        pb.vector("att.query", d)
        pb.linear("mlp1", d, d)
        pb.linear("mlp2", d, config.num_classes)
        super().__init__(config, pb.params)

    def _pool(self, x, acts, score_shift: float = 0.0):
        """Gram tokens per layer, attention weights, pooled embedding.

        score_shift adds a constant to every attention score; softmax shift
        invariance means it must not change anything (diagnostic knob used
        by the invariance tests).
        """
        _forward_backbone(self.params, self.config, x, acts)
        n = x.shape[0]
        d = self.config.embed_dim
        tokens = []
        scores = []
        for name in self.config.gram_layer_names():
            g = gram(acts[name])
            e = ad.linear(ad.triu_flatten(g),
                          self.params[f"gram.{name}.weight"],
                          self.params[f"gram.{name}.bias"])
            s = ad.matmul(ad.tanh(ad.matmul(e, self.params["att.weight"])),
                          self.params["att.query"])
            tokens.append(ad.reshape(e, (n, 1, d)))
            scores.append(s)
        stacked = ad.concat(tokens, axis=1)                  # (N, L, d)
        raw = ad.concat(scores, axis=1)
        if score_shift:
            raw = ad.add(raw, float(score_shift))
        alpha = ad.softmax(raw, axis=1)                      # (N, L)
        pooled = ad.matmul(ad.reshape(alpha, (n, 1, len(tokens))), stacked)
        return ad.reshape(pooled, (n, d)), alpha

    def forward(self, x, capture=None, score_shift: float = 0.0):
        x = self._check_input(x)
        acts = {} if capture is None else capture
        z, alpha = self._pool(x, acts, score_shift)
        acts["attention"] = alpha
        h = ad.relu(ad.linear(z, self.params["mlp1.weight"], self.params["mlp1.bias"]))
        return ad.linear(h, self.params["mlp2.weight"], self.params["mlp2.bias"])

    def embed(self, x):
        x = self._check_input(x)
        z, _ = self._pool(x, {})
        return z

    def activation_names(self):
        return self.config.conv_layer_names()

    def default_gradcam_layers(self):
        return (f"conv{self.config.truncation}",)


class MultiPatch(Model):
    def __init__(self, config: ArchConfig):
        for bi, branch in enumerate(config.branch_configs):
            geoms = [LayerGeom(k, s, 0) for (k, s, _) in branch]
            disjoint, margin = is_disjoint(geoms)
            if not disjoint:
                raise ConfigError(
                    f"multi-patch branch {bi + 1} has overlapping receptive fields "
                    f"(jump - size margin {margin}); use kernel <= stride stacks")
        pb = _ParamBuilder(config.seed)
        for bi, branch in enumerate(config.branch_configs, start=1):
            cin = 3
            for li, (k, s, c) in enumerate(branch, start=1):
                pb.conv(f"branch{bi}.layer{li}.weight", c, cin, k)
                if li > 1:
                    pb.norm(f"branch{bi}.layer{li}.norm", c)
                cin = c
            pb.conv(f"branch{bi}.score.weight", config.num_classes, cin, 1)
            pb.params[f"branch{bi}.score.bias"] = Tensor(
                np.zeros(config.num_classes, dtype=np.float32))
        super().__init__(config, pb.params)

    def _branch_logits(self, x, acts):
        logits = []
        for bi, branch in enumerate(self.config.branch_configs, start=1):
            h = x
            for li, (k, s, c) in enumerate(branch, start=1):
                h = ad.conv2d(h, self.params[f"branch{bi}.layer{li}.weight"],
                              stride=s, padding=0)
                if li > 1:
                    h = ad.instance_norm(h, self.params[f"branch{bi}.layer{li}.norm.gamma"],
                                         self.params[f"branch{bi}.layer{li}.norm.beta"])
                h = ad.relu(h)
                acts[f"branch{bi}.layer{li}"] = h
            score = ad.conv2d(h, self.params[f"branch{bi}.score.weight"])
            score = ad.add(score, ad.reshape(self.params[f"branch{bi}.score.bias"],
                                             (1, self.config.num_classes, 1, 1)))
            acts[f"branch{bi}.score"] = score
            logits.append(ad.spatial_mean(score))
        return logits

    def forward(self, x, capture=None):
        x = self._check_input(x)
        acts = {} if capture is None else capture
        b1, b2, b3 = self._branch_logits(x, acts)
        return ad.mul(ad.add(ad.add(b1, b2), b3), 1.0 / 3.0)

    def embed(self, x):
        x = self._check_input(x)
        return ad.concat(self._branch_logits(x, {}), axis=1)

    def activation_names(self):
        names = []
        for bi, branch in enumerate(self.config.branch_configs, start=1):
            names.extend(f"branch{bi}.layer{li}" for li in range(1, len(branch) + 1))
        return tuple(names)

    def default_gradcam_layers(self):
        return tuple(f"branch{bi}.layer{len(branch)}"
                     for bi, branch in enumerate(self.config.branch_configs, start=1))

    def branch_receptive_fields(self) -> tuple:
        """Final receptive-field size of each branch (its patch size)."""
        sizes = []
        for branch in self.config.branch_configs:
            geoms = [LayerGeom(k, s, 0) for (k, s, _) in branch]
            sizes.append(receptive_field(geoms)[-1].size)
        return tuple(sizes)


_MODEL_CLASSES = {
    "truncated-resnet": TruncatedResNet,
    "gram-attention": GramAttention,
    "multi-patch": MultiPatch,
}


def _layer_widths(cfg: ArchConfig) -> dict:
    """Channel width of each retained conv layer, by activation name."""
    widths = {"conv1": cfg.stem_width}
    idx = 2
    layout, _ = _backbone_layout(cfg)
    for (b, cin, cout, stride, full) in layout:
        widths[f"conv{idx}"] = cout
        idx += 1
        if full:
            widths[f"conv{idx}"] = cout
            idx += 1
    return widths


def build_model(config: ArchConfig) -> Model:
    """Validate the config and construct the requested architecture."""
    config.validate()
    return _MODEL_CLASSES[config.variant](config)


def default_config(variant: str, **overrides) -> ArchConfig:
    return replace(ArchConfig(variant=variant), **overrides).validate()
