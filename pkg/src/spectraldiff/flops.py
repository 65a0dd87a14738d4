"""Closed-form operation counts for 3x3 convolution vs. product layers.

One multiply-accumulate counts as two FLOPs. Only the layers that differ
between backbones enter the reduction ratio; shared layers (pointwise
projections, attention, normalization, activations) are reported as
separate rows.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

from .denoiser import Backbone, DenoiserConfig, _attention_sites


@dataclass(frozen=True)
class FlopsRow:
    name: str
    kind: str
    c_in: int
    c_out: int
    height: int
    width: int
    flops: int


@dataclass
class FlopsReport:
    rows: dict[str, list[FlopsRow]] = field(default_factory=dict)

    def total(self, backbone, kinds=None) -> int:
        rows = self.rows[Backbone(backbone).value]
        return sum(r.flops for r in rows if kinds is None or r.kind in kinds)

    def core_ratio(self) -> float:
        """PRODUCT / CONV over the replaced layers only."""
        return self.total(Backbone.PRODUCT, {"product"}) / self.total(Backbone.CONV, {"conv3x3"})

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["backbone", "name", "kind", "c_in", "c_out", "height", "width", "flops"])
        for backbone, rows in self.rows.items():
            for r in rows:
                writer.writerow([backbone, r.name, r.kind, r.c_in, r.c_out, r.height, r.width, r.flops])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = []
        for backbone in self.rows:
            core = "product" if backbone == Backbone.PRODUCT.value else "conv3x3"
            lines.append(
                f"{backbone:>8}: total {self.total(backbone):>16,d} FLOPs  "
                f"(core {self.total(backbone, {core}):,d})"
            )
        lines.append(f"core product/conv ratio: {self.core_ratio():.5f} (reduction x{1 / self.core_ratio():.2f})")
        return "\n".join(lines)


def conv_flops(c_in: int, c_out: int, height: int, width: int, k: int = 3) -> int:
    for v in (c_in, c_out, height, width, k):
        if v <= 0:
            raise ValueError("dimensions must be positive")
    return 2 * k * k * c_in * c_out * height * width


def product_flops(channels: int, height: int, width: int, ratio: int = 4) -> int:
    if channels % ratio:
        raise ValueError(f"bottleneck ratio {ratio} does not divide {channels}")
    hidden = channels // ratio
    matmuls = 2 * (channels * hidden + hidden * channels) * height * width
    return matmuls + channels * height * width


def reduction_ratio(channels, ratio: int = 4) -> float:
    """Conv FLOPs over product-layer FLOPs for C_in == C_out == C."""
    c = Fraction(channels)
    return float(18 * c * c / (Fraction(4, ratio) * c * c + c))


def _pointwise(name, c_in, c_out, h, w):
    return FlopsRow(name, "pointwise", c_in, c_out, h, w, 2 * c_in * c_out * h * w)


def _norm_act(name, c, h, w):
    # mean, variance, normalize, affine and SiLU: a fixed handful of ops per element
    return FlopsRow(name, "norm_act", c, c, h, w, 8 * c * h * w)


def _attention(name, c, c_ctx, h, w, ctx_hw):
    n = h * w
    self_part = 2 * n * c * c * 4 + 2 * 2 * n * n * c
    cross_part = 2 * n * c * c * 2 + 2 * 2 * ctx_hw * c_ctx * c + 2 * 2 * n * ctx_hw * c
    return FlopsRow(name, "attention", c, c, h, w, self_part + cross_part)


def _core(cfg, backbone, name, c, h, w):
    if backbone is Backbone.PRODUCT:
        return FlopsRow(name, "product", c, c, h, w, product_flops(c, h, w, cfg.bottleneck_ratio))
    return FlopsRow(name, "conv3x3", c, c, h, w, conv_flops(c, c, h, w))


def _layer_rows(cfg: DenoiserConfig, backbone: Backbone, height: int, width: int) -> list[FlopsRow]:
    rows = []
    sites = set(_attention_sites(cfg))

    def resblock(prefix, c_in, c_out, h, w):
        if c_in != c_out:
            rows.append(_pointwise(f"{prefix}.adapt", c_in, c_out, h, w))
        for i in (1, 2):
            rows.append(_norm_act(f"{prefix}.norm{i}", c_out, h, w))
            rows.append(_core(cfg, backbone, f"{prefix}.core{i}", c_out, h, w))

    def attn(prefix, c, h, w, level):
        ctx_hw = (height >> level) * (width >> level)
        rows.append(_attention(prefix, c, cfg.cond_embed_channels, h, w, ctx_hw))

    h, w = height, width
    rows.append(_pointwise("stem", cfg.image_channels + cfg.cond_channels, cfg.base_channels, h, w))
    enc = cfg.encoder_channels
    c = cfg.base_channels
    for i, c_out in enumerate(enc):
        resblock(f"down{i}", c, c_out, h, w)
        if ("down", i) in sites:
            attn(f"down{i}.attn", c_out, h, w, i)
        c = c_out
        h, w = h // 2, w // 2
    resblock("mid", c, c, h, w)
    if ("mid", 0) in sites:
        attn("mid.attn", c, h, w, cfg.depth)
    for j, c_out in enumerate(cfg.decoder_channels):
        h, w = h * 2, w * 2
        rows.append(_pointwise(f"up{j}.upconv", c, c, h, w))
        resblock(f"up{j}", c + enc[cfg.depth - 1 - j], c_out, h, w)
        if ("up", j) in sites:
            attn(f"up{j}.attn", c_out, h, w, cfg.depth - 1 - j)
        c = c_out
    rows.append(_norm_act("out.norm", c, h, w))
    rows.append(_pointwise("out", c, cfg.image_channels, h, w))
    return rows


def model_report(cfg: DenoiserConfig, height: int, width: int) -> FlopsReport:
    """Per-layer counts for both backbones at the widths given by ``cfg``."""
    report = FlopsReport()
    for backbone in (Backbone.PRODUCT, Backbone.CONV):
        report.rows[backbone.value] = _layer_rows(cfg, backbone, height, width)
    return report
