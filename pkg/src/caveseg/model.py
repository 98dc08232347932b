"""CaveSeg network: windowed-attention backbone, pyramid pooling head and
two-branch multi-scale feature aggregation.

All building blocks are plain functions over a flat ``name -> Tensor`` weight
dictionary so that the same code path serves training, inference, gradient
checks and checkpointing.  Token grids and feature maps use the
``channels x height x width`` layout; inside a transformer block tokens are
temporarily laid out as ``height x width x channels``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ParameterError, ShapeError
from .tensor import Tensor

MASK_VALUE = -1e9
IMAGE_MEAN = np.array([123.675, 116.28, 103.53])
IMAGE_STD = np.array([58.395, 57.12, 57.375])

Weights = Mapping[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 4
    embed_dim: int = 48
    depths: tuple = (2, 2, 2, 2)
    num_heads: tuple = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: int = 4
    ppm_scales: tuple = (1, 2, 3, 6)
    fusion_channels: int = 128
    num_classes: int = 13
    input_h: int = 540
    input_w: int = 960
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "num_heads", tuple(int(h) for h in self.num_heads))
        object.__setattr__(self, "ppm_scales", tuple(int(s) for s in self.ppm_scales))
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ConfigError("depths and num_heads need exactly four entries")
        if self.patch_size < 1 or self.window_size < 1:
            raise ConfigError("patch_size and window_size must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if any(d < 1 for d in self.depths):
            raise ConfigError(f"every stage needs at least one block, got {self.depths}")
        for s, (dim, heads) in enumerate(zip(self.stage_dims, self.num_heads)):
            if heads < 1 or dim % heads:
                raise ConfigError(f"stage {s}: dimension {dim} not divisible by {heads} heads")
        if self.fusion_channels < 4 or self.fusion_channels % 4:
            raise ConfigError("fusion_channels must be a positive multiple of 4")
        if not self.ppm_scales or min(self.ppm_scales) < 1:
            raise ConfigError(f"invalid ppm_scales {self.ppm_scales}")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive")

    @property
    def stage_dims(self) -> tuple:
        return tuple(self.embed_dim * 2**s for s in range(4))

    @property
    def pad_multiple(self) -> int:
        return self.patch_size * 2 ** (len(self.depths) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("depths", "num_heads", "ppm_scales"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def with_updates(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


PRESETS = {
    "default": ModelConfig(),
    "tiny": ModelConfig(embed_dim=8, depths=(1, 1, 1, 1), num_heads=(1, 2, 4, 8), window_size=4,
                        fusion_channels=32, input_h=64, input_w=64),
}


def norm_groups(channels: int) -> int:
    """Group count for the head's group normalization."""
    return math.gcd(channels, 8)


@dataclass
class FeatureMap:
    stage: int
    tensor: Tensor
    factor: int

    @property
    def shape(self) -> tuple:
        return self.tensor.shape


@dataclass
class AttentionMask:
    """Per-window matrix of token pairs allowed to attend to each other."""

    allowed: np.ndarray  # (num_windows, T, T) bool

    @property
    def additive(self) -> np.ndarray:
        return np.where(self.allowed, 0.0, MASK_VALUE)

    @property
    def permissive(self) -> bool:
        return bool(self.allowed.all())


@dataclass(frozen=True)
class WindowLayout:
    height: int
    width: int
    padded_height: int
    padded_width: int
    window: int
    shift: int

    @property
    def grid(self) -> tuple:
        return self.padded_height // self.window, self.padded_width // self.window


# ----------------------------------------------------------------------------
# initialization
# ----------------------------------------------------------------------------


def _trunc_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def weight_shapes(config: ModelConfig) -> dict:
    """Ordered ``name -> shape`` for every learned tensor of ``config``."""
    shapes: dict[str, tuple] = {}
    p, e = config.patch_size, config.embed_dim
    shapes["patch_embed.proj.weight"] = (3 * p * p, e)
    shapes["patch_embed.proj.bias"] = (e,)
    shapes["patch_embed.norm.weight"] = (e,)
    shapes["patch_embed.norm.bias"] = (e,)
    dims = config.stage_dims
    for s, depth in enumerate(config.depths):
        c = dims[s]
        if s > 0:
            shapes[f"merges.{s}.norm.weight"] = (2 * c,)
            shapes[f"merges.{s}.norm.bias"] = (2 * c,)
            shapes[f"merges.{s}.reduction.weight"] = (2 * c, c)
        hidden = c * config.mlp_ratio
        for b in range(depth):
            pre = f"stages.{s}.blocks.{b}"
            shapes[f"{pre}.norm1.weight"] = (c,)
            shapes[f"{pre}.norm1.bias"] = (c,)
            shapes[f"{pre}.attn.qkv.weight"] = (c, 3 * c)
            shapes[f"{pre}.attn.qkv.bias"] = (3 * c,)
            shapes[f"{pre}.attn.proj.weight"] = (c, c)
            shapes[f"{pre}.attn.proj.bias"] = (c,)
            shapes[f"{pre}.norm2.weight"] = (c,)
            shapes[f"{pre}.norm2.bias"] = (c,)
            shapes[f"{pre}.mlp.fc1.weight"] = (c, hidden)
            shapes[f"{pre}.mlp.fc1.bias"] = (hidden,)
            shapes[f"{pre}.mlp.fc2.weight"] = (hidden, c)
            shapes[f"{pre}.mlp.fc2.bias"] = (c,)
        shapes[f"stages.{s}.out_norm.weight"] = (c,)
        shapes[f"stages.{s}.out_norm.bias"] = (c,)

    f = config.fusion_channels
    branch = f // 4
    for i, _ in enumerate(config.ppm_scales):
        shapes[f"ppm.branches.{i}.weight"] = (branch, dims[3], 1, 1)
        shapes[f"ppm.branches.{i}.bias"] = (branch,)
    _conv_gn(shapes, "ppm.bottleneck", f, dims[3] + branch * len(config.ppm_scales), 3)
    for i in range(3):
        shapes[f"lateral.{i}.weight"] = (f, dims[i], 1, 1)
        shapes[f"lateral.{i}.bias"] = (f,)
        _conv_gn(shapes, f"td_smooth.{i}", f, f, 3)
    for i in range(1, 4):
        _conv_gn(shapes, f"bu_down.{i}", f, f, 3)
    _conv_gn(shapes, "fuse", f, 8 * f, 3)
    shapes["classifier.weight"] = (config.num_classes, f, 1, 1)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def _conv_gn(shapes, prefix, cout, cin, k):
    shapes[f"{prefix}.conv.weight"] = (cout, cin, k, k)
    shapes[f"{prefix}.gn.weight"] = (cout,)
    shapes[f"{prefix}.gn.bias"] = (cout,)


def init_weights(config: ModelConfig, seed: int = 0) -> dict:
    """Seeded initialization.

    Linear projections: truncated normal (std 0.02); head convolutions:
    He-normal over fan-in; classifier: normal (std 0.01); biases zero;
    normalization scales one and shifts zero.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        elif ".norm" in name or "out_norm" in name or ".gn." in name:
            data = np.ones(shape)
        elif name.startswith("classifier"):
            data = rng.standard_normal(shape) * 0.01
        elif len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        else:
            data = _trunc_normal(rng, shape)
        weights[name] = Tensor(data, requires_grad=True)
    return weights


def count_parameters(weights: Weights) -> int:
    return int(sum(t.size for t in weights.values()))


# ----------------------------------------------------------------------------
# small helpers
# ----------------------------------------------------------------------------


def _linear(x: Tensor, weights: Weights, prefix: str, bias: bool = True) -> Tensor:
    y = x @ weights[prefix + ".weight"]
    return y + weights[prefix + ".bias"] if bias else y


def _ln(x: Tensor, weights: Weights, prefix: str, eps: float) -> Tensor:
    return T.layer_norm(x, weights[prefix + ".weight"], weights[prefix + ".bias"], eps)


def _conv_gn_relu(x: Tensor, weights: Weights, prefix: str, stride: int = 1, eps: float = 1e-5) -> Tensor:
    w = weights[prefix + ".conv.weight"]
    y = T.conv2d(x, w, None, stride=stride, padding=w.shape[-1] // 2)
    y = T.group_norm(y, norm_groups(y.shape[0]), weights[prefix + ".gn.weight"], weights[prefix + ".gn.bias"], eps)
    return T.relu(y)


def _conv(x: Tensor, weights: Weights, prefix: str) -> Tensor:
    w = weights[prefix + ".weight"]
    return T.conv2d(x, w, weights.get(prefix + ".bias"), stride=1, padding=w.shape[-1] // 2)


def _channels_last(x: Tensor) -> Tensor:
    return x.permute(1, 2, 0)


def _channels_first(x: Tensor) -> Tensor:
    return x.permute(2, 0, 1)


def pad_to_multiple(image: Tensor, multiple: int) -> Tensor:
    """Zero-pad the bottom/right edges of a ``C x H x W`` tensor up to ``multiple``."""
    _, h, w = image.shape
    ph, pw = -h % multiple, -w % multiple
    return T.pad(image, [(0, 0), (0, ph), (0, pw)])


def image_to_tensor(image: np.ndarray) -> Tensor:
    """``H x W x 3`` uint8 RGB to a normalized ``3 x H x W`` tensor."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected an H x W x 3 RGB image, got shape {image.shape}")
    x = (image.astype(np.float64) - IMAGE_MEAN) / IMAGE_STD
    return Tensor(np.ascontiguousarray(x.transpose(2, 0, 1)))


# ----------------------------------------------------------------------------
# backbone
# ----------------------------------------------------------------------------


def patch_embed(image: Tensor, weights: Weights, config: ModelConfig) -> Tensor:
    """Project non-overlapping ``p x p`` RGB patches to ``embed_dim`` channels."""
    c, h, w = image.shape
    p = config.patch_size
    if c != 3:
        raise ShapeError(f"patch_embed expects 3 input channels, got {c}")
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {p}; call pad_to_multiple first")
    gh, gw = h // p, w // p
    patches = image.reshape(c, gh, p, gw, p).permute(1, 3, 0, 2, 4).reshape(gh * gw, c * p * p)
    tokens = _ln(_linear(patches, weights, "patch_embed.proj"), weights, "patch_embed.norm", config.norm_eps)
    return _channels_first(tokens.reshape(gh, gw, config.embed_dim))


def effective_window(h: int, w: int, window: int) -> tuple:
    """Window size and shift actually used on an ``h x w`` grid.

    Grids no larger than the window collapse to one window of the grid's
    smaller side, and shifting is disabled there.
    """
    if min(h, w) <= window:
        return min(h, w), 0
    return window, window // 2


@functools.lru_cache(maxsize=64)
def _window_labels(h: int, w: int, window: int, shift: int) -> np.ndarray:
    hp, wp = -(-h // window) * window, -(-w // window) * window
    labels = np.zeros((hp, wp), dtype=np.int64)
    if shift:
        bands = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
        for i, rows in enumerate(bands):
            for j, cols in enumerate(bands):
                labels[rows, cols] = 3 * i + j
    padded = np.zeros((hp, wp), dtype=bool)
    padded[h:, :] = True
    padded[:, w:] = True
    padded = np.roll(padded, (-shift, -shift), (0, 1))
    labels[padded] = -1
    nh, nw = hp // window, wp // window
    return labels.reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh * nw, window * window)


def attention_mask(h: int, w: int, window: int, shift: int) -> AttentionMask:
    """Mask for a grid rolled by ``-shift``.

    Tokens that were not neighbours before the cyclic roll (wrapped-around
    strips) are kept apart, and padding tokens only see other padding tokens.
    """
    labels = _window_labels(h, w, window, shift)
    return AttentionMask(labels[:, :, None] == labels[:, None, :])


def _partition_hwc(x: Tensor, window: int, shift: int):
    h, w, c = x.shape
    hp, wp = -(-h // window) * window, -(-w // window) * window
    x = T.pad(x, [(0, hp - h), (0, wp - w), (0, 0)])
    if shift:
        x = T.roll(x, (-shift, -shift), (0, 1))
    nh, nw = hp // window, wp // window
    windows = x.reshape(nh, window, nw, window, c).permute(0, 2, 1, 3, 4).reshape(nh * nw, window * window, c)
    return windows, WindowLayout(h, w, hp, wp, window, shift)


def _reverse_hwc(windows: Tensor, layout: WindowLayout) -> Tensor:
    nh, nw = layout.grid
    ws, c = layout.window, windows.shape[-1]
    x = windows.reshape(nh, nw, ws, ws, c).permute(0, 2, 1, 3, 4).reshape(layout.padded_height, layout.padded_width, c)
    if layout.shift:
        x = T.roll(x, (layout.shift, layout.shift), (0, 1))
    if (layout.padded_height, layout.padded_width) != (layout.height, layout.width):
        x = x[: layout.height, : layout.width]
    return x


def window_partition(tokens: Tensor, window: int, shift: int = 0):
    """Roll a ``C x h x w`` grid by ``(-shift, -shift)`` and tile it into windows.

    Returns ``(windows, mask, layout)`` with windows shaped
    ``num_windows x window**2 x C``. Grids not divisible by the window are
    zero-padded at the bottom/right before rolling.
    """
    if not 0 <= shift < window:
        raise ParameterError(f"shift {shift} must satisfy 0 <= shift < window {window}")
    _, h, w = tokens.shape
    windows, layout = _partition_hwc(_channels_last(tokens), window, shift)
    return windows, attention_mask(h, w, window, shift), layout


def window_reverse(windows: Tensor, layout: WindowLayout) -> Tensor:
    """Inverse of :func:`window_partition` (un-tile, roll back, crop)."""
    return _channels_first(_reverse_hwc(windows, layout))


def windowed_attention(windows: Tensor, mask: Optional[AttentionMask], weights: Weights, prefix: str,
                       num_heads: int, return_weights: bool = False):
    """Multi-head self-attention inside each window.

    ``prefix`` selects the ``qkv`` and ``proj`` projections. With
    ``return_weights`` the post-softmax attention matrix
    (``num_windows x heads x T x T``) is returned too.
    """
    nw, t, c = windows.shape
    if num_heads < 1 or c % num_heads:
        raise ConfigError(f"{c} channels cannot be split across {num_heads} heads")
    d = c // num_heads
    qkv = _linear(windows, weights, prefix + ".qkv").reshape(nw, t, 3, num_heads, d).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.permute(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    if mask is not None and not mask.permissive:
        scores = scores + mask.additive[:, None, :, :]
    attn = T.softmax(scores, axis=-1)
    out = (attn @ v).permute(0, 2, 1, 3).reshape(nw, t, c)
    out = _linear(out, weights, prefix + ".proj")
    return (out, attn) if return_weights else out


def swin_block(tokens: Tensor, weights: Weights, prefix: str, num_heads: int, window: int, shift: int,
               eps: float = 1e-5) -> Tensor:
    """Pre-norm transformer block: (S)W-MSA and a GELU MLP, each with a residual."""
    _, h, w = tokens.shape
    x = _channels_last(tokens)
    y = _ln(x, weights, prefix + ".norm1", eps)
    windows, layout = _partition_hwc(y, window, shift)
    mask = attention_mask(h, w, window, shift)
    y = _reverse_hwc(windowed_attention(windows, mask, weights, prefix + ".attn", num_heads), layout)
    x = x + y
    z = _ln(x, weights, prefix + ".norm2", eps)
    z = _linear(T.gelu(_linear(z, weights, prefix + ".mlp.fc1")), weights, prefix + ".mlp.fc2")
    return _channels_first(x + z)


def patch_merge(tokens: Tensor, weights: Weights, prefix: str, eps: float = 1e-5) -> Tensor:
    """Concatenate each 2x2 neighbourhood (4C), normalize, project to 2C."""
    c, h, w = tokens.shape
    x = T.pad(_channels_last(tokens), [(0, h % 2), (0, w % 2), (0, 0)])
    parts = [x[0::2, 0::2], x[1::2, 0::2], x[0::2, 1::2], x[1::2, 1::2]]
    x = _ln(T.concat(parts, axis=-1), weights, prefix + ".norm", eps)
    return _channels_first(_linear(x, weights, prefix + ".reduction", bias=False))


def backbone_forward(image: Tensor, weights: Weights, config: ModelConfig) -> list:
    """Four-stage hierarchy; returns the normalized post-block map of every stage."""
    _, h, w = image.shape
    m = config.pad_multiple
    if h % m or w % m:
        raise ShapeError(f"backbone input {h}x{w} must be a multiple of {m}; call pad_to_multiple first")
    eps = config.norm_eps
    x = patch_embed(image, weights, config)
    feats = []
    for s, depth in enumerate(config.depths):
        if s > 0:
            x = patch_merge(x, weights, f"merges.{s}", eps)
        gh, gw = x.shape[1:]
        window, shift = effective_window(gh, gw, config.window_size)
        for b in range(depth):
            x = swin_block(x, weights, f"stages.{s}.blocks.{b}", config.num_heads[s], window,
                           shift if b % 2 else 0, eps)
        out = _channels_first(_ln(_channels_last(x), weights, f"stages.{s}.out_norm", eps))
        feats.append(FeatureMap(s, out, config.patch_size * 2**s))
    return feats


# ----------------------------------------------------------------------------
# head
# ----------------------------------------------------------------------------


def effective_ppm_scales(h: int, w: int, scales: Sequence[int]) -> list:
    """Pool sizes clamped to the feature map, e.g. (1, 2, 3, 6) on 3x3 -> 1, 2, 3, 3."""
    return [(min(s, h), min(s, w)) for s in scales]


def ppm_forward(stage4, weights: Weights, config: ModelConfig) -> Tensor:
    x = stage4.tensor if isinstance(stage4, FeatureMap) else stage4
    _, h, w = x.shape
    outs = [x]
    for i, (sh, sw) in enumerate(effective_ppm_scales(h, w, config.ppm_scales)):
        y = T.adaptive_avg_pool2d(x, sh, sw)
        y = T.relu(_conv(y, weights, f"ppm.branches.{i}"))
        outs.append(T.bilinear_resize(y, h, w))
    return _conv_gn_relu(T.concat(outs, axis=0), weights, "ppm.bottleneck", eps=config.norm_eps)


def _resize_to(x: Tensor, like: Tensor) -> Tensor:
    return T.bilinear_resize(x, like.shape[1], like.shape[2])


def aggregate_features(stages: Sequence, ppm_out: Tensor, weights: Weights, config: ModelConfig) -> Tensor:
    """Top-down and bottom-up fusion of the four stages into one stage-1-resolution map.

    Top-down: the PPM output seeds the coarsest level; each finer level adds a
    1x1 lateral projection of its stage to the upsampled coarser level and is
    smoothed by a 3x3 conv. Bottom-up: starting from the finest top-down level,
    each coarser level adds a stride-2 3x3 downsample of the finer one. All
    eight levels are resized to stage-1 resolution, concatenated and fused.
    """
    eps = config.norm_eps
    maps = [s.tensor if isinstance(s, FeatureMap) else s for s in stages]
    laterals = [_conv(maps[i], weights, f"lateral.{i}") for i in range(3)] + [ppm_out]
    for i in (2, 1, 0):
        laterals[i] = laterals[i] + _resize_to(laterals[i + 1], laterals[i])
    top_down = [_conv_gn_relu(laterals[i], weights, f"td_smooth.{i}", eps=eps) for i in range(3)] + [laterals[3]]

    bottom_up = [top_down[0]]
    for i in range(1, 4):
        down = _conv_gn_relu(bottom_up[-1], weights, f"bu_down.{i}", stride=2, eps=eps)
        if down.shape != top_down[i].shape:
            down = _resize_to(down, top_down[i])
        bottom_up.append(top_down[i] + down)

    target = top_down[0]
    levels = [_resize_to(t, target) for t in top_down + bottom_up]
    return _conv_gn_relu(T.concat(levels, axis=0), weights, "fuse", eps=eps)


def model_forward(image: Tensor, weights: Weights, config: ModelConfig) -> Tensor:
    """Per-pixel class logits (``num_classes x H x W``) for a ``3 x H x W`` image."""
    _, h, w = image.shape
    if h < config.patch_size or w < config.patch_size:
        raise DataError(f"image {h}x{w} is smaller than the {config.patch_size}px patch")
    x = pad_to_multiple(image, config.pad_multiple)
    stages = backbone_forward(x, weights, config)
    ppm_out = ppm_forward(stages[3], weights, config)
    fused = aggregate_features(stages, ppm_out, weights, config)
    logits = _conv(fused, weights, "classifier")
    logits = T.bilinear_resize(logits, x.shape[1], x.shape[2])
    if (x.shape[1], x.shape[2]) != (h, w):
        logits = logits[:, :h, :w]
    return logits


# ----------------------------------------------------------------------------
# model object
# ----------------------------------------------------------------------------


@dataclass
class CaveSegModel:
    config: ModelConfig
    weights: dict = field(repr=False)

    @classmethod
    def initialize(cls, config: Optional[ModelConfig] = None, seed: int = 0) -> "CaveSegModel":
        config = config or ModelConfig()
        return cls(config, init_weights(config, seed))

    def __call__(self, image: Tensor) -> Tensor:
        return model_forward(image, self.weights, self.config)

    def parameters(self) -> list:
        return list(self.weights.values())

    def zero_grad(self) -> None:
        for p in self.weights.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return count_parameters(self.weights)

    def predict(self, image) -> np.ndarray:
        """Class-id map for an RGB uint8 image or a prepared tensor."""
        x = image if isinstance(image, Tensor) else image_to_tensor(image)
        with T.no_grad():
            logits = self(x)
        return logits.data.argmax(axis=0).astype(np.uint8)
