"""Cross-modal style-transfer stage: the PAT->pseudo-MRI generator, its
reverse counterpart, patch discriminators, and the least-squares adversarial
losses.

Generators follow the classic residual translation layout: conv stem, two
stride-2 downsampling convs, 9 residual blocks, two upsampling stages, and a
sigmoid-bounded output conv, with per-channel instance normalization.
"""

from __future__ import annotations

import torch
import torch.nn as nn


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Single-channel image translator with a bounded [0, 1] output."""

    def __init__(self, base: int = 16, n_residual: int = 9):
        super().__init__()
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(1, base, 7),
            nn.InstanceNorm2d(base),
            nn.ReLU(inplace=True),
        )
        self.down = nn.Sequential(
            nn.Conv2d(base, base * 2, 3, stride=2, padding=1),
            nn.InstanceNorm2d(base * 2),
            nn.ReLU(inplace=True),
            nn.Conv2d(base * 2, base * 4, 3, stride=2, padding=1),
            nn.InstanceNorm2d(base * 4),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(base * 4) for _ in range(n_residual)])
        self.up = nn.Sequential(
            nn.ConvTranspose2d(base * 4, base * 2, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(base * 2),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(base * 2, base, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(base),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(base, 1, 7))

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"generator input size must be divisible by 4, got {h}x{w}")
        x = self.stem(x)
        x = self.down(x)
        x = self.blocks(x)
        x = self.up(x)
        return torch.sigmoid(self.head(x))


class PatchDiscriminator(nn.Module):
    """Three stride-2 layers; emits a realness grid at 1/8 input resolution."""

    def __init__(self, base: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(1, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base, base * 2, 4, stride=2, padding=1),
            nn.InstanceNorm2d(base * 2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base * 2, base * 4, 4, stride=2, padding=1),
            nn.InstanceNorm2d(base * 4),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base * 4, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.body(x)


def synthesis_forward(g_a: Generator, g_b: Generator, pat: torch.Tensor, mri: torch.Tensor) -> dict:
    """Run both translation directions and their cycles."""
    pseudo_mri = g_a(pat)
    pseudo_pat = g_b(mri)
    pat_cycle = g_b(pseudo_mri)
    mri_cycle = g_a(pseudo_pat)
    return {
        "pseudo_mri": pseudo_mri,
        "pseudo_pat": pseudo_pat,
        "pat_cycle": pat_cycle,
        "mri_cycle": mri_cycle,
    }


def gan_losses(d_mri: PatchDiscriminator, d_pat: PatchDiscriminator,
               g_a: Generator, g_b: Generator,
               real_pat: torch.Tensor, real_mri: torch.Tensor) -> dict:
    """Least-squares adversarial objectives, averaged over both directions.

    Generators minimize mean (D(fake) - 1)^2; discriminators minimize
    mean (D(real) - 1)^2 + mean D(fake)^2. Fakes are detached in the
    discriminator objective.
    """
    fake_mri = g_a(real_pat)
    fake_pat = g_b(real_mri)
    loss_g = 0.5 * (((d_mri(fake_mri) - 1.0) ** 2).mean()
                    + ((d_pat(fake_pat) - 1.0) ** 2).mean())
    loss_d_mri = ((d_mri(real_mri) - 1.0) ** 2).mean() + (d_mri(fake_mri.detach()) ** 2).mean()
    loss_d_pat = ((d_pat(real_pat) - 1.0) ** 2).mean() + (d_pat(fake_pat.detach()) ** 2).mean()
    return {"loss_g": loss_g, "loss_d": 0.5 * (loss_d_mri + loss_d_pat)}
