"""Multi-level deformation estimation: a shared feature pyramid over the
channel-concatenated image pair, a coarse head and a residual refinement
head per level, coarse-to-fine field assembly, and the registration losses.

Per-level raw estimates are assembled by composition while the moving
stream is warped with the negated running field; the network's final output
is the negation of the assembled raw field, which resamples the moving
image onto the fixed geometry. All estimation heads are zero-initialized so
an untrained network is exactly the identity map.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .perceptual import PerceptualPyramid, pyramid_l1
from .warpfield import compose_flow, smoothness_tensor, upsample_flow, warp_tensor


def _zeroed(conv: nn.Conv2d) -> nn.Conv2d:
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class MultiLevelRegistration(nn.Module):
    """Coarse-to-fine deformation estimator over a shared feature pyramid."""

    def __init__(self, levels: int = 2, base: int = 16):
        super().__init__()
        if levels < 1:
            raise ValueError("need at least one level")
        self.levels = levels
        stages = []
        in_ch = 2
        ch = base
        self._stage_channels = []
        for _ in range(levels):
            stages.append(nn.Sequential(
                nn.Conv2d(in_ch, ch, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(ch, ch, 3, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
            ))
            self._stage_channels.append(ch)
            in_ch = ch
            ch = ch * 2
        self.stages = nn.ModuleList(stages)
        self.coarse_heads = nn.ModuleList([
            nn.Sequential(
                nn.Conv2d(c, c, 3, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
                _zeroed(nn.Conv2d(c, 2, 3, padding=1)),
            )
            for c in self._stage_channels
        ])
        self.refine_heads = nn.ModuleList([
            nn.Sequential(
                nn.Conv2d(2, base, 3, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
                _zeroed(nn.Conv2d(base, 2, 3, padding=1)),
            )
            for _ in self._stage_channels
        ])

    def extract_level_features(self, moving: torch.Tensor, fixed: torch.Tensor, k: int) -> torch.Tensor:
        """Features of the concatenated pair at scale 1 / 2**k."""
        if not 1 <= k <= self.levels:
            raise ValueError(f"level {k} out of range [1, {self.levels}]")
        x = torch.cat([moving, fixed], dim=1)
        for stage in self.stages[:k]:
            x = stage(x)
        return x

    def cdfe(self, feats: torch.Tensor, k: int) -> torch.Tensor:
        """Coarse deformation estimate at the level-k resolution."""
        if not 1 <= k <= self.levels:
            raise ValueError(f"level {k} out of range [1, {self.levels}]")
        return self.coarse_heads[k - 1](feats)

    def rdfe(self, coarse: torch.Tensor, k: int) -> torch.Tensor:
        """Refined field: residual prediction added to the coarse estimate."""
        if not 1 <= k <= self.levels:
            raise ValueError(f"level {k} out of range [1, {self.levels}]")
        return coarse + self.refine_heads[k - 1](coarse)

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor):
        """Estimate the field resampling ``moving`` onto ``fixed`` geometry.

        Returns (phi, registered) where registered = warp(moving, phi).
        """
        if moving.shape != fixed.shape:
            raise ValueError("moving and fixed images must share a shape")
        b, _, h, w = moving.shape
        div = 2**self.levels
        if h % div or w % div:
            raise ValueError(f"input size must be divisible by {div}, got {h}x{w}")
        raw = torch.zeros(b, 2, h, w, dtype=moving.dtype, device=moving.device)
        for k in range(self.levels, 0, -1):
            moved = warp_tensor(moving, -raw)
            feats = self.extract_level_features(moved, fixed, k)
            refined = self.rdfe(self.cdfe(feats, k), k)
            raw = compose_flow(raw, upsample_flow(refined, h, w))
        phi = -raw
        return phi, warp_tensor(moving, phi)

    register = forward


def bidirectional_similarity_loss(pyramid: PerceptualPyramid, phi: torch.Tensor,
                                  pseudo_mri: torch.Tensor, mri: torch.Tensor,
                                  lambda_rev: float = 0.2) -> torch.Tensor:
    """Forward term compares warp(mri, -phi) against the pseudo-MRI; the
    backward term compares warp(pseudo_mri, phi) against the MRI, weighted
    by ``lambda_rev``. Both use the L1 feature-pyramid distance."""
    if pseudo_mri.shape != mri.shape:
        raise ValueError("images must share a shape")
    forward = pyramid_l1(pyramid, warp_tensor(mri, -phi), pseudo_mri)
    backward = pyramid_l1(pyramid, warp_tensor(pseudo_mri, phi), mri)
    return forward + lambda_rev * backward


def registration_loss(pyramid: PerceptualPyramid, phi: torch.Tensor,
                      pseudo_mri: torch.Tensor, mri: torch.Tensor,
                      lambda_rev: float = 0.2, lambda_sm: float = 10.0) -> torch.Tensor:
    sim = bidirectional_similarity_loss(pyramid, phi, pseudo_mri, mri, lambda_rev)
    return sim + lambda_sm * smoothness_tensor(phi)
