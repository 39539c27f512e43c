"""Frozen multi-layer feature pyramid, Gram matrices, and the perceptual /
style losses that control the synthesis network's cycle consistency.

The extractor is a fixed-seed 5-stage convolutional pyramid (channels
8/16/32/64/64, 3x3 kernels, stride 2 between stages, tanh nonlinearity).
Its parameters are generated once from the recorded seed and never trained,
so feature extraction is a pure deterministic function of the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

PYRAMID_CHANNELS = (8, 16, 32, 64, 64)
LAYER_WEIGHTS = (1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0, 1.0)
MIN_INPUT = 16
DEFAULT_SEED = 77


@dataclass(frozen=True)
class FeaturePyramid:
    """Ordered multi-scale feature maps with their per-level style weights."""

    levels: list
    layer_weights: tuple = LAYER_WEIGHTS

    def __post_init__(self):
        if len(self.levels) != len(self.layer_weights):
            raise ValueError(f"expected {len(self.layer_weights)} levels, got {len(self.levels)}")
        sizes = [tuple(lv.shape[-2:]) for lv in self.levels]
        for (h0, w0), (h1, w1) in zip(sizes, sizes[1:]):
            if h1 > h0 or w1 > w0:
                raise ValueError("spatial dims must be non-increasing across levels")


class PerceptualPyramid(nn.Module):
    """Frozen 5-stage convolutional feature extractor."""

    def __init__(self, seed: int = DEFAULT_SEED, channels=PYRAMID_CHANNELS, dtype=torch.float32):
        super().__init__()
        self.seed = seed
        self.channels = tuple(channels)
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = 1
        for i, out_ch in enumerate(self.channels):
            stride = 1 if i == 0 else 2
            conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, dtype=dtype)
            fan_in, fan_out = in_ch * 9, out_ch * 9
            std = (2.0 / (fan_in + fan_out)) ** 0.5
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            convs.append(conv)
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list:
        if x.ndim != 4:
            raise ValueError("expected (B, 1, H, W) input")
        h, w = x.shape[-2:]
        if h < MIN_INPUT or w < MIN_INPUT:
            raise ValueError(f"input must be at least {MIN_INPUT}x{MIN_INPUT}, got {h}x{w}")
        levels = []
        for conv in self.convs:
            x = torch.tanh(conv(x))
            levels.append(x)
        return levels

    def features(self, x: torch.Tensor) -> FeaturePyramid:
        return FeaturePyramid(self.forward(x))


def gram_matrix(f: torch.Tensor) -> torch.Tensor:
    """G[a, b] = sum_xy f[a] f[b] / (C * H * W); symmetric PSD."""
    if f.ndim == 3:
        return gram_matrix(f.unsqueeze(0)).squeeze(0)
    if f.ndim != 4:
        raise ValueError("expected (C, H, W) or (B, C, H, W)")
    b, c, h, w = f.shape
    flat = f.reshape(b, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


def perceptual_loss(pyramid: PerceptualPyramid, a_cycle, a, b_cycle, b) -> torch.Tensor:
    """Squared feature distance of both cycle pairs, summed over pyramid levels."""
    _check_pairs(a_cycle, a, b_cycle, b)
    total = 0.0
    for fa_c, fa in zip(pyramid(a_cycle), pyramid(a)):
        total = total + ((fa - fa_c) ** 2).mean()
    for fb_c, fb in zip(pyramid(b_cycle), pyramid(b)):
        total = total + ((fb - fb_c) ** 2).mean()
    return total


def style_loss(pyramid: PerceptualPyramid, a_cycle, a, b_cycle, b) -> torch.Tensor:
    """Weighted squared Frobenius distance between the Gram matrices of each pair."""
    _check_pairs(a_cycle, a, b_cycle, b)
    total = 0.0
    for omega, fa_c, fa in zip(LAYER_WEIGHTS, pyramid(a_cycle), pyramid(a)):
        total = total + omega * ((gram_matrix(fa) - gram_matrix(fa_c)) ** 2).sum()
    for omega, fb_c, fb in zip(LAYER_WEIGHTS, pyramid(b_cycle), pyramid(b)):
        total = total + omega * ((gram_matrix(fb) - gram_matrix(fb_c)) ** 2).sum()
    return total


def pst_loss(pyramid: PerceptualPyramid, a_cycle, a, b_cycle, b,
             lambda_p: float = 1.0, lambda_s: float = 100.0) -> torch.Tensor:
    return (lambda_p * perceptual_loss(pyramid, a_cycle, a, b_cycle, b)
            + lambda_s * style_loss(pyramid, a_cycle, a, b_cycle, b))


def pyramid_l1(pyramid: PerceptualPyramid, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean absolute feature distance, summed over pyramid levels."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    total = 0.0
    for fx, fy in zip(pyramid(x), pyramid(y)):
        total = total + (fx - fy).abs().mean()
    return total


def _check_pairs(a_cycle, a, b_cycle, b):
    if a_cycle.shape != a.shape or b_cycle.shape != b.shape:
        raise ValueError("cycle images must match their originals in shape")
