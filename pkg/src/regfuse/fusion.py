"""Dual-branch feature-decomposition fusion: a shared shallow encoder built
from channel-attention transformer blocks, a long-range base encoder built
from lite transformer blocks, an invertible-coupling detail encoder, fusion
layers for each branch, a mirrored decoder, and the fusion losses.

Base features carry low-frequency modality-shared structure; detail features
carry high-frequency modality-specific content. The coupling layers are
exactly invertible by construction, so the detail branch is lossless.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .perceptual import PerceptualPyramid
from .registration import registration_loss
from .warpfield import sobel_tensor


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel dimension of an NCHW tensor."""

    def __init__(self, dim):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, unbiased=False, keepdim=True)
        x = (x - mu) / torch.sqrt(var + 1e-5)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class ChannelAttention(nn.Module):
    """Multi-head self-attention across the channel dimension."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, 1)
        self.qkv_dw = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3)
        self.project = nn.Conv2d(dim, dim, 1)

    def forward(self, x, return_weights=False):
        b, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q = q.reshape(b, self.heads, c // self.heads, h * w)
        k = k.reshape(b, self.heads, c // self.heads, h * w)
        v = v.reshape(b, self.heads, c // self.heads, h * w)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.temperature, dim=-1)
        out = (attn @ v).reshape(b, c, h, w)
        out = self.project(out)
        if return_weights:
            return out, attn
        return out


class GatedFeedForward(nn.Module):
    """Depthwise gated feed-forward sublayer."""

    def __init__(self, dim, expansion=2.0):
        super().__init__()
        hidden = int(dim * expansion)
        self.inp = nn.Conv2d(dim, hidden * 2, 1)
        self.dw = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2)
        self.out = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        a, g = self.dw(self.inp(x)).chunk(2, dim=1)
        return self.out(F.gelu(a) * g)


class TransformerBlock(nn.Module):
    """Channel-attention block with a gated feed-forward sublayer."""

    def __init__(self, dim, heads, expansion=2.0):
        super().__init__()
        self.norm1 = ChannelLayerNorm(dim)
        self.attn = ChannelAttention(dim, heads)
        self.norm2 = ChannelLayerNorm(dim)
        self.ffn = GatedFeedForward(dim, expansion)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))

    def attention_weights(self, x):
        _, attn = self.attn(self.norm1(x), return_weights=True)
        return attn


class SpatialAttention(nn.Module):
    """Spatial self-attention on a pooled token grid (cheap at large sizes)."""

    def __init__(self, dim, heads, max_grid=16):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.max_grid = max_grid
        self.qkv = nn.Linear(dim, dim * 3)
        self.project = nn.Linear(dim, dim)

    def forward(self, x, return_weights=False):
        b, c, h, w = x.shape
        gh, gw = min(h, self.max_grid), min(w, self.max_grid)
        t = F.adaptive_avg_pool2d(x, (gh, gw)) if (gh, gw) != (h, w) else x
        tokens = t.flatten(2).transpose(1, 2)  # (b, n, c)
        n = tokens.shape[1]
        q, k, v = self.qkv(tokens).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / (c // self.heads) ** 0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        out = self.project(out).transpose(1, 2).reshape(b, c, gh, gw)
        if (gh, gw) != (h, w):
            out = F.interpolate(out, size=(h, w), mode="bilinear", align_corners=True)
        if return_weights:
            return out, attn
        return out


class LiteTransformerBlock(nn.Module):
    """Split-channel block: spatial attention on one half, convolution on the
    other, followed by a pointwise feed-forward sublayer."""

    def __init__(self, dim, heads, max_grid=16, expansion=2.0):
        super().__init__()
        self.split = dim // 2
        self.norm1 = ChannelLayerNorm(dim)
        self.attn = SpatialAttention(self.split, heads, max_grid)
        rest = dim - self.split
        self.conv = nn.Sequential(
            nn.Conv2d(rest, rest, 3, padding=1, groups=rest),
            nn.GELU(),
            nn.Conv2d(rest, rest, 1),
        )
        self.norm2 = ChannelLayerNorm(dim)
        hidden = int(dim * expansion)
        self.ffn = nn.Sequential(nn.Conv2d(dim, hidden, 1), nn.GELU(), nn.Conv2d(hidden, dim, 1))

    def forward(self, x):
        y = self.norm1(x)
        ya, yc = y[:, :self.split], y[:, self.split:]
        x = x + torch.cat([self.attn(ya), self.conv(yc)], dim=1)
        return x + self.ffn(self.norm2(x))

    def attention_weights(self, x):
        y = self.norm1(x)
        _, attn = self.attn(y[:, :self.split], return_weights=True)
        return attn


class BottleneckBlock(nn.Module):
    """Pointwise expand -> depthwise 3x3 -> pointwise project."""

    def __init__(self, in_ch, out_ch, expansion=2):
        super().__init__()
        hidden = in_ch * expansion
        self.expand = nn.Conv2d(in_ch, hidden, 1)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.project = nn.Conv2d(hidden, out_ch, 1)

    def forward(self, x):
        return self.project(F.gelu(self.dw(F.gelu(self.expand(x)))))


class CouplingLayer(nn.Module):
    """Exactly invertible channel coupling.

    Forward: y2 = x2 + L1(x1); y1 = x1 * exp(L2(y2)) + L3(y2), with the
    scale log-clamped to [-clamp, clamp] before exponentiation.
    """

    def __init__(self, channels, split=None, clamp=5.0):
        super().__init__()
        c = channels // 2 if split is None else split
        if not 1 <= c < channels:
            raise ValueError(f"invalid split {c} for {channels} channels")
        self.channels = channels
        self.split = c
        self.clamp = clamp
        self.map_add = BottleneckBlock(c, channels - c)
        self.map_scale = BottleneckBlock(channels - c, c)
        self.map_shift = BottleneckBlock(channels - c, c)

    def forward(self, x):
        x1, x2 = x[:, :self.split], x[:, self.split:]
        y2 = x2 + self.map_add(x1)
        s = self.map_scale(y2).clamp(-self.clamp, self.clamp)
        y1 = x1 * torch.exp(s) + self.map_shift(y2)
        return torch.cat([y1, y2], dim=1)

    def inverse(self, y):
        y1, y2 = y[:, :self.split], y[:, self.split:]
        s = self.map_scale(y2).clamp(-self.clamp, self.clamp)
        x1 = (y1 - self.map_shift(y2)) * torch.exp(-s)
        x2 = y2 - self.map_add(x1)
        return torch.cat([x1, x2], dim=1)


class DetailEncoder(nn.Module):
    """Stack of invertible coupling layers; lossless by construction."""

    def __init__(self, channels, num_layers=2):
        super().__init__()
        self.layers = nn.ModuleList([CouplingLayer(channels) for _ in range(num_layers)])

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def inverse(self, y):
        for layer in reversed(self.layers):
            y = layer.inverse(y)
        return y


class FeatureEncoder(nn.Module):
    """Conv stem plus channel-attention transformer blocks."""

    def __init__(self, channels=64, blocks=4, heads=8, expansion=2.0):
        super().__init__()
        self.stem = nn.Conv2d(1, channels, 3, padding=1)
        self.blocks = nn.Sequential(*[TransformerBlock(channels, heads, expansion) for _ in range(blocks)])

    def forward(self, x):
        return self.blocks(self.stem(x))


class BaseEncoder(nn.Module):
    """Long-range branch built from lite transformer blocks."""

    def __init__(self, channels=64, blocks=1, heads=8):
        super().__init__()
        self.blocks = nn.Sequential(*[LiteTransformerBlock(channels, heads) for _ in range(blocks)])

    def forward(self, x):
        return self.blocks(x)


class DualBranchEncoder(nn.Module):
    """Shallow encoder with the base/detail decomposition branches."""

    def __init__(self, channels=64, blocks=4, heads=8, lt_blocks=1, inn_layers=2, expansion=2.0):
        super().__init__()
        self.feature = FeatureEncoder(channels, blocks, heads, expansion)
        self.base = BaseEncoder(channels, lt_blocks, heads)
        self.detail = DetailEncoder(channels, inn_layers)


class BaseFusion(nn.Module):
    """Channel-concatenate the base features, then a lite transformer block."""

    def __init__(self, channels=64, heads=8):
        super().__init__()
        self.block = LiteTransformerBlock(channels * 2, heads)
        self.project = nn.Conv2d(channels * 2, channels, 1)

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError("base features must share a shape")
        return self.project(self.block(torch.cat([a, b], dim=1)))


class DetailFusion(nn.Module):
    """Channel-concatenate the detail features, couple, then project back."""

    def __init__(self, channels=64):
        super().__init__()
        self.coupling = CouplingLayer(channels * 2, split=channels)
        self.project = nn.Conv2d(channels * 2, channels, 1)

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError("detail features must share a shape")
        return self.project(self.coupling(torch.cat([a, b], dim=1)))


class FusionLayers(nn.Module):
    def __init__(self, channels=64, heads=8):
        super().__init__()
        self.base = BaseFusion(channels, heads)
        self.detail = DetailFusion(channels)


class Decoder(nn.Module):
    """Mirror of the feature encoder with a sigmoid-bounded output conv."""

    def __init__(self, channels=64, blocks=4, heads=8, expansion=2.0):
        super().__init__()
        self.project = nn.Conv2d(channels * 2, channels, 1)
        self.blocks = nn.Sequential(*[TransformerBlock(channels, heads, expansion) for _ in range(blocks)])
        self.head = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, base, detail):
        if base.shape != detail.shape:
            raise ValueError("base and detail features must share a shape")
        x = self.blocks(self.project(torch.cat([base, detail], dim=1)))
        return torch.sigmoid(self.head(x))


@dataclass
class DecomposedFeatures:
    """Shallow, base (low-frequency shared) and detail (high-frequency
    modality-specific) feature maps for one image."""

    shallow: torch.Tensor
    base: torch.Tensor
    detail: torch.Tensor
    modality: str = "PAT"

    def __post_init__(self):
        if not (self.shallow.shape == self.base.shape == self.detail.shape):
            raise ValueError("shallow/base/detail features must share a shape")


class FusionModel(nn.Module):
    """Encoder, fusion layers, and decoder wired together."""

    def __init__(self, channels=64, blocks=4, heads=8, lt_blocks=1, inn_layers=2, expansion=2.0):
        super().__init__()
        self.encoder = DualBranchEncoder(channels, blocks, heads, lt_blocks, inn_layers, expansion)
        self.fusion = FusionLayers(channels, heads)
        self.decoder = Decoder(channels, blocks, heads, expansion)

    def encode(self, img, modality="PAT"):
        shallow = self.encoder.feature(img)
        return DecomposedFeatures(
            shallow=shallow,
            base=self.encoder.base(shallow),
            detail=self.encoder.detail(shallow),
            modality=modality,
        )

    def decode(self, base, detail):
        return self.decoder(base, detail)

    def reconstruct(self, img, modality="PAT"):
        feats = self.encode(img, modality)
        return self.decode(feats.base, feats.detail), feats

    def fuse_features(self, feats_p, feats_m):
        fused_base = self.fusion.base(feats_p.base, feats_m.base)
        fused_detail = self.fusion.detail(feats_p.detail, feats_m.detail)
        return self.decode(fused_base, fused_detail)

    def forward(self, pat, mri):
        return self.fuse_features(self.encode(pat, "PAT"), self.encode(mri, "MRI"))


# ---------------------------------------------------------------------------
# Structural similarity and the fusion losses
# ---------------------------------------------------------------------------

def _gaussian_window(size, sigma, dtype, device):
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=dtype, device=device) - half
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = g[:, None] * g[None, :]
    return (kernel / kernel.sum()).reshape(1, 1, size, size)


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> torch.Tensor:
    """Mean local SSIM over valid Gaussian windows; differentiable."""
    if a.ndim == 2:
        a = a.unsqueeze(0).unsqueeze(0)
        b = b.unsqueeze(0).unsqueeze(0)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    h, w = a.shape[-2:]
    if h < window_size or w < window_size:
        raise ValueError(f"images must be at least {window_size}x{window_size} for SSIM")
    win = _gaussian_window(window_size, sigma, a.dtype, a.device)
    mu1 = F.conv2d(a, win)
    mu2 = F.conv2d(b, win)
    sigma1 = F.conv2d(a * a, win) - mu1 * mu1
    sigma2 = F.conv2d(b * b, win) - mu2 * mu2
    sigma12 = F.conv2d(a * b, win) - mu1 * mu2
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ssim_map = ((2 * mu1 * mu2 + c1) * (2 * sigma12 + c2)) / (
        (mu1 * mu1 + mu2 * mu2 + c1) * (sigma1 + sigma2 + c2))
    return ssim_map.mean()


def correlation_coefficient(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pearson correlation over all elements; errors on zero-variance input."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    am = a - a.mean()
    bm = b - b.mean()
    var_a = (am * am).sum()
    var_b = (bm * bm).sum()
    if float(var_a) == 0.0 or float(var_b) == 0.0:
        raise ValueError("correlation undefined on constant input")
    return (am * bm).sum() / torch.sqrt(var_a * var_b)


def reconstruction_loss(orig: torch.Tensor, recon: torch.Tensor, mu: float = 5.0) -> torch.Tensor:
    """MSE plus mu * (1 - SSIM)."""
    if orig.shape != recon.shape:
        raise ValueError("shape mismatch")
    return ((orig - recon) ** 2).mean() + mu * (1.0 - ssim(orig, recon))


def decomposition_loss(base_p, base_m, detail_p, detail_m, eps: float = 1.01) -> torch.Tensor:
    """Squared detail correlation over the shifted base correlation."""
    cc_detail = correlation_coefficient(detail_p, detail_m)
    cc_base = correlation_coefficient(base_p, base_m)
    return cc_detail**2 / (cc_base + eps)


def fusion_intensity_loss(fused, pat, mri) -> torch.Tensor:
    """Mean absolute deviation from the elementwise source maximum."""
    if fused.shape != pat.shape or fused.shape != mri.shape:
        raise ValueError("shape mismatch")
    return (fused - torch.maximum(pat, mri)).abs().mean()


def fusion_gradient_loss(fused, pat, mri) -> torch.Tensor:
    """Mean absolute deviation of the fused Sobel magnitude from the source maximum."""
    if fused.shape != pat.shape or fused.shape != mri.shape:
        raise ValueError("shape mismatch")
    target = torch.maximum(sobel_tensor(pat), sobel_tensor(mri))
    return (sobel_tensor(fused) - target).abs().mean()


def stage1_fusion_loss(pat, mri, pat_recon, mri_recon,
                       feats_p: DecomposedFeatures, feats_m: DecomposedFeatures,
                       alpha1: float = 1.0, alpha2: float = 2.0, mu: float = 5.0,
                       eps: float = 1.01) -> torch.Tensor:
    """Per-modality reconstruction plus the weighted decomposition penalty."""
    loss_pat = reconstruction_loss(pat, pat_recon, mu)
    loss_mri = reconstruction_loss(mri, mri_recon, mu)
    decomp = decomposition_loss(feats_p.base, feats_m.base, feats_p.detail, feats_m.detail, eps)
    return loss_pat + alpha1 * loss_mri + alpha2 * decomp


def stage2_fusion_loss(pyramid: PerceptualPyramid, fused, pat, mri,
                       phi, pseudo_mri, real_mri,
                       feats_p: DecomposedFeatures, feats_m: DecomposedFeatures,
                       alpha3: float = 10.0, alpha4: float = 2.0,
                       lambda_rev: float = 0.2, lambda_sm: float = 10.0,
                       eps: float = 1.01) -> torch.Tensor:
    """Joint registration + fusion objective for the second training stage."""
    reg = registration_loss(pyramid, phi, pseudo_mri, real_mri, lambda_rev, lambda_sm)
    intensity = fusion_intensity_loss(fused, pat, mri)
    grad = fusion_gradient_loss(fused, pat, mri)
    decomp = decomposition_loss(feats_p.base, feats_m.base, feats_p.detail, feats_m.detail, eps)
    return reg + intensity + alpha3 * grad + alpha4 * decomp
