"""Noise-prediction U-Net with product or convolutional residual blocks.

The network maps (x_{s,d}, d, c_img) to a predicted spatial perturbation of
the same shape. Both backbones share every layer except the two core layers
inside each residual block, which are either element-wise product layers
(x * G(x), G a pointwise bottleneck) or 3x3 convolutions.

Public entry points take fields shaped (H, W, C) or batches (N, H, W, C);
internally everything is NCHW.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .diffusion import cosine_schedule


class Backbone(str, enum.Enum):
    PRODUCT = "product"
    CONV = "conv"


class OutputHead(str, enum.Enum):
    EPS = "eps"
    X0 = "x0"


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    image_channels: int = 3
    base_channels: int = 8
    channel_mult: tuple = (1, 2)
    bottleneck_ratio: int = 4
    attn_down_last: bool = False
    attn_middle: bool = True
    attn_up_first: bool = False
    backbone: Backbone = Backbone.PRODUCT
    step_embed_dim: int = 32
    cond_channels: int = 3
    cond_embed_channels: int = 8
    num_groups: int = 8
    num_steps: int = 1080
    output_head: OutputHead = OutputHead.EPS

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))
        object.__setattr__(self, "backbone", Backbone(self.backbone))
        object.__setattr__(self, "output_head", OutputHead(self.output_head))
        if self.depth < 1:
            raise ConfigError("need at least one down/up block")
        if self.bottleneck_ratio < 1:
            raise ConfigError("bottleneck_ratio must be >= 1")
        if self.step_embed_dim % 2:
            raise ConfigError("step_embed_dim must be even")
        widths = set(self.encoder_channels) | set(self.decoder_channels) | {self.base_channels}
        for c in sorted(widths):
            if self.backbone is Backbone.PRODUCT and c % self.bottleneck_ratio:
                raise ConfigError(f"bottleneck_ratio {self.bottleneck_ratio} does not divide width {c}")
            if c % self._groups(c):
                raise ConfigError(f"width {c} not divisible into {self.num_groups} groups")

    @property
    def depth(self) -> int:
        return len(self.channel_mult)

    @property
    def encoder_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    @property
    def decoder_channels(self) -> list[int]:
        enc = self.encoder_channels
        return enc[-2::-1] + [self.base_channels]

    def _groups(self, c: int) -> int:
        return math.gcd(self.num_groups, c)

    def with_backbone(self, backbone) -> "DenoiserConfig":
        return DenoiserConfig(**{**asdict(self), "backbone": Backbone(backbone)})

    def to_json(self) -> str:
        d = asdict(self)
        d["backbone"] = self.backbone.value
        d["output_head"] = self.output_head.value
        d["channel_mult"] = list(self.channel_mult)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DenoiserConfig":
        return cls(**json.loads(text))


def reference_config(backbone=Backbone.PRODUCT, num_steps=1080) -> DenoiserConfig:
    """Full-size layout: 3 down / 1 middle / 3 up at widths 64-128-256."""
    return DenoiserConfig(
        base_channels=64,
        channel_mult=(1, 2, 4),
        attn_down_last=True,
        attn_middle=True,
        attn_up_first=True,
        step_embed_dim=256,
        cond_embed_channels=64,
        num_groups=8,
        num_steps=num_steps,
        backbone=backbone,
    )


def toy_config(backbone=Backbone.PRODUCT, num_steps=120) -> DenoiserConfig:
    return DenoiserConfig(backbone=backbone, num_steps=num_steps)


def tiny_config(backbone=Backbone.PRODUCT, num_steps=16) -> DenoiserConfig:
    """Smallest layout that still exercises every block type (for gradient checks)."""
    return DenoiserConfig(
        base_channels=4,
        channel_mult=(1, 2),
        bottleneck_ratio=2,
        attn_down_last=True,
        attn_middle=True,
        attn_up_first=True,
        step_embed_dim=8,
        cond_embed_channels=4,
        num_groups=2,
        num_steps=num_steps,
        backbone=backbone,
    )


# ----------------------------------------------------------------- layout


def _resblock_shapes(cfg, prefix, c_in, c_out):
    shapes = {}
    if c_in != c_out:
        shapes[f"{prefix}.adapt.w"] = (c_out, c_in)
        shapes[f"{prefix}.adapt.b"] = (c_out,)
    for i in (1, 2):
        shapes[f"{prefix}.norm{i}.g"] = (c_out,)
        shapes[f"{prefix}.norm{i}.b"] = (c_out,)
        core = f"{prefix}.core{i}"
        if cfg.backbone is Backbone.PRODUCT:
            hidden = c_out // cfg.bottleneck_ratio
            shapes[f"{core}.w1"] = (hidden, c_out)
            shapes[f"{core}.b1"] = (hidden,)
            shapes[f"{core}.w2"] = (c_out, hidden)
            shapes[f"{core}.b2"] = (c_out,)
        else:
            shapes[f"{core}.w"] = (c_out, c_out, 3, 3)
            shapes[f"{core}.b"] = (c_out,)
    shapes[f"{prefix}.temb.w"] = (c_out, cfg.step_embed_dim)
    shapes[f"{prefix}.temb.b"] = (c_out,)
    return shapes


def _attn_shapes(cfg, prefix, c):
    shapes = {}
    for kind, ctx in (("self", c), ("cross", cfg.cond_embed_channels)):
        p = f"{prefix}.{kind}"
        shapes[f"{p}.norm.g"] = (c,)
        shapes[f"{p}.norm.b"] = (c,)
        shapes[f"{p}.q.w"] = (c, c)
        shapes[f"{p}.k.w"] = (c, ctx)
        shapes[f"{p}.v.w"] = (c, ctx)
        shapes[f"{p}.o.w"] = (c, c)
        shapes[f"{p}.o.b"] = (c,)
    return shapes


def _attention_sites(cfg):
    sites = []
    if cfg.attn_down_last:
        sites.append(("down", cfg.depth - 1))
    if cfg.attn_middle:
        sites.append(("mid", 0))
    if cfg.attn_up_first:
        sites.append(("up", 0))
    return sites


def _cond_levels(cfg):
    """Downsampling level (0 = full res) for every attention site."""
    levels = {}
    for kind, i in _attention_sites(cfg):
        if kind == "down":
            levels[(kind, i)] = i
        elif kind == "mid":
            levels[(kind, i)] = cfg.depth
        else:
            levels[(kind, i)] = cfg.depth - 1 - i
    return levels


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple]:
    shapes = {}
    e = cfg.step_embed_dim
    shapes["temb.l1.w"] = (e, e)
    shapes["temb.l1.b"] = (e,)
    shapes["temb.l2.w"] = (e, e)
    shapes["temb.l2.b"] = (e,)
    shapes["stem.w"] = (cfg.base_channels, cfg.image_channels + cfg.cond_channels)
    shapes["stem.b"] = (cfg.base_channels,)
    if _attention_sites(cfg):
        shapes["cond.l1.w"] = (cfg.cond_embed_channels, cfg.cond_channels)
        shapes["cond.l1.b"] = (cfg.cond_embed_channels,)
        shapes["cond.l2.w"] = (cfg.cond_embed_channels, cfg.cond_embed_channels)
        shapes["cond.l2.b"] = (cfg.cond_embed_channels,)

    enc = cfg.encoder_channels
    c = cfg.base_channels
    for i, c_out in enumerate(enc):
        shapes.update(_resblock_shapes(cfg, f"down{i}", c, c_out))
        if cfg.attn_down_last and i == cfg.depth - 1:
            shapes.update(_attn_shapes(cfg, f"down{i}.attn", c_out))
        c = c_out
    shapes.update(_resblock_shapes(cfg, "mid", c, c))
    if cfg.attn_middle:
        shapes.update(_attn_shapes(cfg, "mid.attn", c))
    for j, c_out in enumerate(cfg.decoder_channels):
        skip = enc[cfg.depth - 1 - j]
        shapes[f"up{j}.upconv.w"] = (c, c)
        shapes[f"up{j}.upconv.b"] = (c,)
        shapes.update(_resblock_shapes(cfg, f"up{j}", c + skip, c_out))
        if cfg.attn_up_first and j == 0:
            shapes.update(_attn_shapes(cfg, f"up{j}.attn", c_out))
        c = c_out
    shapes["out.norm.g"] = (c,)
    shapes["out.norm.b"] = (c,)
    shapes["out.w"] = (cfg.image_channels, c)
    shapes["out.b"] = (cfg.image_channels,)
    return shapes


def count_params(cfg: DenoiserConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def product_layer_param_count(channels: int, ratio: int) -> int:
    hidden = channels // ratio
    return channels * hidden + hidden * channels + hidden + channels


def conv_layer_param_count(c_in: int, c_out: int, k: int = 3) -> int:
    return k * k * c_in * c_out + c_out


# ------------------------------------------------------------------ model


@dataclass(eq=False)
class DenoiserModel:
    config: DenoiserConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigError(f"parameter names differ from config (missing={missing[:3]}, extra={extra[:3]})")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != tuple(shape):
                raise ConfigError(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "DenoiserModel":
        return DenoiserModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def __call__(self, x_sd, d, c_img):
        return denoiser_forward(x_sd, d, c_img, self)


def init_model(cfg: DenoiserConfig, seed=0, dtype=np.float32, zero_head=True) -> DenoiserModel:
    """Fan-in scaled normal init; the output projection starts at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            value = np.ones(shape)
        elif name.endswith(".b2"):
            # product modulation starts near identity
            value = np.ones(shape)
        elif leaf.startswith("b"):
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            value = rng.standard_normal(shape) / math.sqrt(fan_in)
        params[name] = value.astype(dtype)
    if zero_head:
        params["out.w"][...] = 0
        params["out.b"][...] = 0
    return DenoiserModel(cfg, params)


def step_embedding(d, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps, shape (N, dim)."""
    d = np.atleast_1d(np.asarray(d, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = d[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class _Graph:
    """One forward pass: wraps parameter arrays as graph leaves."""

    def __init__(self, model: DenoiserModel):
        self.cfg = model.config
        self.leaves = {k: ag.Tensor(v) for k, v in model.params.items()}

    def __getitem__(self, name):
        return self.leaves[name]

    def norm(self, x, prefix):
        c = x.shape[1]
        return ag.group_norm(x, self.cfg._groups(c), self[f"{prefix}.g"], self[f"{prefix}.b"])

    def core(self, x, prefix):
        if self.cfg.backbone is Backbone.PRODUCT:
            return product_layer(x, self[f"{prefix}.w1"], self[f"{prefix}.b1"], self[f"{prefix}.w2"], self[f"{prefix}.b2"])
        return ag.conv3x3(x, self[f"{prefix}.w"], self[f"{prefix}.b"])

    def resblock(self, x, temb, prefix):
        if f"{prefix}.adapt.w" in self.leaves:
            x = ag.pointwise(x, self[f"{prefix}.adapt.w"], self[f"{prefix}.adapt.b"])
        h = self.core(ag.silu(self.norm(x, f"{prefix}.norm1")), f"{prefix}.core1")
        t = ag.linear(temb, self[f"{prefix}.temb.w"], self[f"{prefix}.temb.b"])
        # shift after the norm: with one channel per group a per-channel
        # offset added before it would be normalized away
        h = ag.add(self.norm(h, f"{prefix}.norm2"), ag.reshape(t, t.shape + (1, 1)))
        h = self.core(ag.silu(h), f"{prefix}.core2")
        return ag.add(x, h)

    def _attend(self, x, ctx, prefix):
        n, c, hh, ww = x.shape
        a = self.norm(x, f"{prefix}.norm")
        q = ag.pointwise(a, self[f"{prefix}.q.w"])
        src = a if ctx is None else ctx
        k = ag.pointwise(src, self[f"{prefix}.k.w"])
        v = ag.pointwise(src, self[f"{prefix}.v.w"])

        def tokens(t):
            return ag.transpose(ag.reshape(t, (n, t.shape[1], -1)), (0, 2, 1))

        o = ag.attention(tokens(q), tokens(k), tokens(v))
        o = ag.reshape(ag.transpose(o, (0, 2, 1)), (n, c, hh, ww))
        return ag.add(x, ag.pointwise(o, self[f"{prefix}.o.w"], self[f"{prefix}.o.b"]))

    def attn_block(self, x, ctx, prefix):
        x = self._attend(x, None, f"{prefix}.self")
        return self._attend(x, ctx, f"{prefix}.cross")

    def cond_context(self, c_img, level):
        pooled = c_img
        for _ in range(level):
            pooled = ag.avg_pool2(pooled)
        h = ag.silu(ag.pointwise(pooled, self["cond.l1.w"], self["cond.l1.b"]))
        return ag.pointwise(h, self["cond.l2.w"], self["cond.l2.b"])

    def run(self, x, steps, c):
        cfg = self.cfg
        temb = ag.Tensor(step_embedding(steps, cfg.step_embed_dim).astype(x.dtype))
        temb = ag.silu(ag.linear(temb, self["temb.l1.w"], self["temb.l1.b"]))
        temb = ag.linear(temb, self["temb.l2.w"], self["temb.l2.b"])

        x, c = ag.Tensor(x), ag.Tensor(c)
        levels = _cond_levels(cfg)
        contexts = {lvl: self.cond_context(c, lvl) for lvl in sorted(set(levels.values()))}

        h = ag.pointwise(ag.concat([x, c], axis=1), self["stem.w"], self["stem.b"])
        skips = []
        for i in range(cfg.depth):
            h = self.resblock(h, temb, f"down{i}")
            if ("down", i) in levels:
                h = self.attn_block(h, contexts[levels["down", i]], f"down{i}.attn")
            skips.append(h)
            h = ag.avg_pool2(h)
        h = self.resblock(h, temb, "mid")
        if ("mid", 0) in levels:
            h = self.attn_block(h, contexts[levels["mid", 0]], "mid.attn")
        for j in range(cfg.depth):
            h = ag.pointwise(ag.upsample2(h), self[f"up{j}.upconv.w"], self[f"up{j}.upconv.b"])
            h = ag.concat([h, skips.pop()], axis=1)
            h = self.resblock(h, temb, f"up{j}")
            if ("up", j) in levels:
                h = self.attn_block(h, contexts[levels["up", j]], f"up{j}.attn")
        h = ag.silu(self.norm(h, "out.norm"))
        out = ag.pointwise(h, self["out.w"], self["out.b"])
        if cfg.output_head is OutputHead.X0:
            # network output is a clean-image estimate u; report the noise it implies
            ab = cosine_schedule(cfg.num_steps).alpha_bar[steps].astype(x.data.dtype)[:, None, None, None]
            inv = 1.0 / np.sqrt(1.0 - ab)
            out = ag.add(ag.mul(x.data, inv), ag.mul(out, -np.sqrt(ab) * inv))
        return out


def product_layer(x, w1, b1, w2, b2):
    """h = x * (W2 silu(W1 x + b1) + b2), all maps pointwise."""
    gate = ag.pointwise(ag.silu(ag.pointwise(x, w1, b1)), w2, b2)
    return ag.mul(x, gate)


def product_layer_forward(x, w1, b1, w2, b2) -> np.ndarray:
    """Numpy convenience wrapper over :func:`product_layer` for NCHW arrays."""
    cout, hidden = np.shape(w2)
    if np.shape(x)[1] != cout or np.shape(w1) != (hidden, cout):
        raise ConfigError(f"product layer weights {np.shape(w1)}/{np.shape(w2)} do not fit {np.shape(x)[1]} channels")
    return product_layer(np.asarray(x), np.asarray(w1), np.asarray(b1), np.asarray(w2), np.asarray(b2)).data


def _to_nchw(a, dtype):
    a = np.asarray(a, dtype=dtype)
    if a.ndim == 3:
        a = a[None]
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def _check_inputs(model, x_sd, d, c_img):
    cfg = model.config
    if np.shape(x_sd) != np.shape(c_img):
        raise ValueError(f"x and condition shapes differ: {np.shape(x_sd)} vs {np.shape(c_img)}")
    if np.shape(x_sd)[-1] != cfg.image_channels:
        raise ValueError(f"expected {cfg.image_channels} channels, got {np.shape(x_sd)[-1]}")
    h, w = np.shape(x_sd)[-3:-1]
    if h % 2**cfg.depth or w % 2**cfg.depth:
        raise ValueError(f"spatial size {h}x{w} must be divisible by {2 ** cfg.depth}")
    steps = np.atleast_1d(d)
    if np.any(steps < 1) or np.any(steps > cfg.num_steps):
        raise ValueError(f"step {d} outside 1..{cfg.num_steps}")


def build_graph(model: DenoiserModel, x_sd, d, c_img):
    """Forward pass that keeps the graph; returns (output NCHW tensor, leaves)."""
    _check_inputs(model, x_sd, d, c_img)
    dtype = model.dtype
    x = _to_nchw(x_sd, dtype)
    c = _to_nchw(c_img, dtype)
    steps = np.broadcast_to(np.atleast_1d(d), (x.shape[0],))
    graph = _Graph(model)
    return graph.run(x, steps, c), graph.leaves


def denoiser_forward(x_sd, d, c_img, model: DenoiserModel) -> np.ndarray:
    """Predicted spatial noise with the same shape as ``x_sd``.

    ``x_sd`` and ``c_img`` are (H, W, C) or (N, H, W, C); ``d`` is an int or
    one step per batch element.
    """
    out, _ = build_graph(model, x_sd, d, c_img)
    y = out.data.transpose(0, 2, 3, 1)
    return y[0] if np.ndim(x_sd) == 3 else y


# ------------------------------------------------------------- checkpoints

_CK_MAGIC = b"SDCK"
_CK_VERSION = 1


def save_checkpoint(model: DenoiserModel, path) -> None:
    blob = model.config.to_json().encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _CK_MAGIC, _CK_VERSION, len(blob)))
        fh.write(blob)
        for name in sorted(model.params):
            arr = np.ascontiguousarray(model.params[name], dtype="<f4")
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, expected_config: DenoiserConfig | None = None) -> DenoiserModel:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointFormatError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    magic, version, blob_len = struct.unpack("<4sII", take(12))
    if magic != _CK_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != _CK_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    try:
        cfg = DenoiserConfig.from_json(take(blob_len).decode())
    except (ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: bad config blob: {exc}") from exc
    if expected_config is not None and cfg != expected_config:
        raise CheckpointFormatError(f"{path}: config does not match the expected one")

    params = {}
    while pos < len(raw):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    try:
        return DenoiserModel(cfg, params)
    except ConfigError as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from exc
