"""Quantitative evaluation: registration metrics (MI, NMI, CC) and fusion
metrics (MI, VIF, Qabf, SF, SSIM, FMI variants).

Histogram metrics use 256 uniform bins on [0, 1] intensities with base-2
logarithms. VIF runs the pixel-domain formulation on 255-scaled intensities
with noise variance 2.0, a 4-scale Gaussian pyramid, and 3x3 Gaussian moment
windows. Qabf uses the standard sigmoid edge-preservation model. FMI is the
histogram NMI of pixel / blockwise-DCT / Haar-detail features, averaged over
the two sources.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.fft import dctn
from scipy.signal import convolve2d

from .fusion import ssim as _ssim_torch
from .image import Image
from .warpfield import DeformationField, warp

REGISTRATION_COLUMNS = ("MI", "NMI", "CC")
FUSION_COLUMNS = ("MI", "VIF", "Qabf", "SF", "SSIM", "FMI_pixel", "FMI_dct", "FMI_w")

# Mean metric values reported for this method and its misaligned baseline on
# the original animal acquisition. Documentation only: phantom runs are not
# expected to reproduce them and no test asserts them.
REFERENCE_REGISTRATION = {
    "misaligned": {"MI": 0.2807, "NMI": 0.1119, "CC": 0.2096},
    "full_pipeline": {"MI": 0.3082, "NMI": 0.1225, "CC": 0.2900},
}
REFERENCE_FUSION = {
    "MI": 4.2421, "VIF": 0.8421, "Qabf": 0.7099, "SF": 0.0434,
    "SSIM": 0.9629, "FMI_pixel": 0.9077, "FMI_dct": 0.3040, "FMI_w": 0.4498,
}


def _pixels(x) -> np.ndarray:
    if isinstance(x, Image):
        return x.pixels.astype(np.float64)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {arr.shape}")
    return arr


def _check_same_shape(*arrays):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


# ---------------------------------------------------------------------------
# Histogram metrics on [0, 1] intensities
# ---------------------------------------------------------------------------

def mutual_information(a, b, bins: int = 256) -> float:
    """MI from a joint histogram of [0, 1] intensities, in bits."""
    a, b = _pixels(a), _pixels(b)
    _check_same_shape(a, b)
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
    p = joint / joint.sum()
    ha = _entropy(p.sum(axis=1))
    hb = _entropy(p.sum(axis=0))
    hab = _entropy(p.ravel())
    return ha + hb - hab


def normalized_mutual_information(a, b, bins: int = 256) -> float:
    """2 * MI / (H(a) + H(b))."""
    a, b = _pixels(a), _pixels(b)
    _check_same_shape(a, b)
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
    p = joint / joint.sum()
    ha = _entropy(p.sum(axis=1))
    hb = _entropy(p.sum(axis=0))
    if ha == 0.0 or hb == 0.0:
        raise ValueError("normalized MI undefined for zero-entropy input")
    return 2.0 * (ha + hb - _entropy(p.ravel())) / (ha + hb)


def normalized_cross_correlation(a, b) -> float:
    """Pearson correlation of the flattened intensities."""
    a, b = _pixels(a), _pixels(b)
    _check_same_shape(a, b)
    am = a - a.mean()
    bm = b - b.mean()
    denom = np.sqrt((am * am).sum() * (bm * bm).sum())
    if denom == 0.0:
        raise ValueError("correlation undefined on constant input")
    return float((am * bm).sum() / denom)


def fusion_mi(fused, a, b, bins: int = 256) -> float:
    """Sum of the fused image's MI with each source."""
    return mutual_information(fused, a, bins) + mutual_information(fused, b, bins)


def spatial_frequency(img) -> float:
    """sqrt(RF^2 + CF^2) from RMS first differences on [0, 1] intensities."""
    px = _pixels(img)
    rf = np.mean((px[:, 1:] - px[:, :-1]) ** 2)
    cf = np.mean((px[1:, :] - px[:-1, :]) ** 2)
    return float(np.sqrt(rf + cf))


def ssim(a, b) -> float:
    """Structural similarity (11x11 Gaussian window, sigma 1.5, unit range)."""
    ta = torch.from_numpy(_pixels(a))
    tb = torch.from_numpy(_pixels(b))
    return float(_ssim_torch(ta, tb))


# ---------------------------------------------------------------------------
# Visual information fidelity (pixel domain)
# ---------------------------------------------------------------------------

def _gaussian_kernel(size: int, sd: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sd * sd))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def vif(fused, reference) -> float:
    """Pixel-domain visual information fidelity of ``fused`` given ``reference``.

    4-scale Gaussian pyramid on 255-scaled intensities, 3x3 Gaussian moment
    windows, scalar channel model with noise variance 2.0.
    """
    dist, ref = _pixels(fused) * 255.0, _pixels(reference) * 255.0
    _check_same_shape(dist, ref)
    if min(ref.shape) < 32:
        raise ValueError("VIF needs at least 32x32 images")
    sigma_nsq = 2.0
    eps = 1e-10
    moment_win = _gaussian_kernel(3, 3.0 / 5.0)
    num = 0.0
    den = 0.0
    for scale in range(1, 5):
        if scale > 1:
            n = 2 ** (4 - scale + 1) + 1
            win = _gaussian_kernel(n, n / 5.0)
            ref = convolve2d(ref, win, mode="valid")[::2, ::2]
            dist = convolve2d(dist, win, mode="valid")[::2, ::2]
        if min(ref.shape) < 3:
            continue
        mu1 = convolve2d(ref, moment_win, mode="valid")
        mu2 = convolve2d(dist, moment_win, mode="valid")
        sigma1_sq = convolve2d(ref * ref, moment_win, mode="valid") - mu1 * mu1
        sigma2_sq = convolve2d(dist * dist, moment_win, mode="valid") - mu2 * mu2
        sigma12 = convolve2d(ref * dist, moment_win, mode="valid") - mu1 * mu2
        sigma1_sq = np.maximum(sigma1_sq, 0.0)
        sigma2_sq = np.maximum(sigma2_sq, 0.0)

        g = sigma12 / (sigma1_sq + eps)
        sv_sq = sigma2_sq - g * sigma12

        g[sigma1_sq < eps] = 0.0
        sv_sq[sigma1_sq < eps] = sigma2_sq[sigma1_sq < eps]
        sigma1_sq[sigma1_sq < eps] = 0.0
        g[sigma2_sq < eps] = 0.0
        sv_sq[sigma2_sq < eps] = 0.0
        sv_sq[g < 0.0] = sigma2_sq[g < 0.0]
        g[g < 0.0] = 0.0
        sv_sq[sv_sq <= eps] = eps

        num += np.sum(np.log10(1.0 + g * g * sigma1_sq / (sv_sq + sigma_nsq)))
        den += np.sum(np.log10(1.0 + sigma1_sq / sigma_nsq))
    if den == 0.0:
        return 1.0
    return float(num / den)


def vif_pair_mean(fused, a, b) -> float:
    """Mean of vif(fused, a) and vif(fused, b), as reported per fused image."""
    return 0.5 * (vif(fused, a) + vif(fused, b))


# ---------------------------------------------------------------------------
# Edge-preservation fidelity (Qabf)
# ---------------------------------------------------------------------------

_QABF_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_QABF_SOBEL_Y = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])


def _edge_strength_orientation(img: np.ndarray):
    sx = convolve2d(img, _QABF_SOBEL_X, mode="same")
    sy = convolve2d(img, _QABF_SOBEL_Y, mode="same")
    g = np.sqrt(sx * sx + sy * sy)
    alpha = np.full_like(img, np.pi / 2)
    nz = sx != 0
    alpha[nz] = np.arctan(sy[nz] / sx[nz])
    return g, alpha


def _edge_preservation(g_s, a_s, g_f, a_f):
    hi = np.maximum(g_s, g_f)
    lo = np.minimum(g_s, g_f)
    ratio = np.zeros_like(g_s)
    nz = hi > 0
    ratio[nz] = lo[nz] / hi[nz]
    angle = 1.0 - np.abs(a_s - a_f) * 2.0 / np.pi
    q_g = 0.9994 / (1.0 + np.exp(-15.0 * (ratio - 0.5)))
    q_a = 0.9879 / (1.0 + np.exp(-22.0 * (angle - 0.8)))
    return q_g * q_a


def qabf(fused, a, b) -> float:
    """Edge-based fusion fidelity weighted by source edge strengths."""
    fused, a, b = _pixels(fused), _pixels(a), _pixels(b)
    _check_same_shape(fused, a, b)
    g_f, a_f = _edge_strength_orientation(fused)
    g_a, a_a = _edge_strength_orientation(a)
    g_b, a_b = _edge_strength_orientation(b)
    q_af = _edge_preservation(g_a, a_a, g_f, a_f)
    q_bf = _edge_preservation(g_b, a_b, g_f, a_f)
    weights = g_a + g_b
    total = weights.sum()
    if total == 0.0:
        return 0.0
    return float((q_af * g_a + q_bf * g_b).sum() / total)


# ---------------------------------------------------------------------------
# Feature mutual information
# ---------------------------------------------------------------------------

FMI_FEATURES = ("pixel", "dct", "wavelet")


def _dct_features(px: np.ndarray) -> np.ndarray:
    h = (px.shape[0] // 8) * 8
    w = (px.shape[1] // 8) * 8
    blocks = px[:h, :w].reshape(h // 8, 8, w // 8, 8)
    return dctn(blocks, type=2, axes=(1, 3), norm="ortho").reshape(h // 8, 8, w // 8, 8).swapaxes(1, 2)


def _haar_detail_features(px: np.ndarray) -> np.ndarray:
    h = (px.shape[0] // 2) * 2
    w = (px.shape[1] // 2) * 2
    p = px[:h, :w]
    a = p[0::2, 0::2]
    b = p[0::2, 1::2]
    c = p[1::2, 0::2]
    d = p[1::2, 1::2]
    lh = (a - b + c - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return np.concatenate([lh, hl, hh], axis=0)


def _extract_features(px: np.ndarray, feature: str) -> np.ndarray:
    if feature == "pixel":
        return px
    if feature == "dct":
        return _dct_features(px)
    if feature == "wavelet":
        return _haar_detail_features(px)
    raise ValueError(f"unknown feature tag {feature!r}, expected one of {FMI_FEATURES}")


def _feature_nmi(f1: np.ndarray, f2: np.ndarray, bins: int) -> float:
    lo = min(f1.min(), f2.min())
    hi = max(f1.max(), f2.max())
    if hi == lo:
        raise ValueError("feature MI undefined for constant features")
    joint, _, _ = np.histogram2d(f1.ravel(), f2.ravel(), bins=bins, range=[[lo, hi], [lo, hi]])
    p = joint / joint.sum()
    h1 = _entropy(p.sum(axis=1))
    h2 = _entropy(p.sum(axis=0))
    if h1 + h2 == 0.0:
        raise ValueError("feature MI undefined for zero-entropy features")
    return 2.0 * (h1 + h2 - _entropy(p.ravel())) / (h1 + h2)


def fmi(fused, a, b, feature: str = "pixel", bins: int = 256) -> float:
    """Histogram-NMI fidelity between fused and source features in [0, 1]."""
    fused, a, b = _pixels(fused), _pixels(a), _pixels(b)
    _check_same_shape(fused, a, b)
    if min(fused.shape) < 16:
        raise ValueError("FMI needs at least 16x16 images")
    ff = _extract_features(fused, feature)
    fa = _extract_features(a, feature)
    fb = _extract_features(b, feature)
    return 0.5 * (_feature_nmi(ff, fa, bins) + _feature_nmi(ff, fb, bins))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Named metric table with per-image rows and mean aggregates."""

    columns: tuple
    per_image: dict  # label -> (n_images, n_columns) array
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for label, rows in self.per_image.items():
            rows = np.asarray(rows, dtype=np.float64)
            if rows.ndim != 2 or rows.shape[1] != len(self.columns):
                raise ValueError(f"rows for {label!r} must be (n, {len(self.columns)})")
            if not np.isfinite(rows).all():
                raise ValueError(f"non-finite metric values for {label!r}")
            self.per_image[label] = rows

    def means(self, label: str) -> dict:
        rows = self.per_image[label]
        return {c: float(v) for c, v in zip(self.columns, rows.mean(axis=0))}

    def to_csv(self) -> str:
        lines = ["label,index," + ",".join(self.columns)]
        for label, rows in self.per_image.items():
            for i, row in enumerate(rows):
                lines.append(f"{label},{i}," + ",".join(f"{v:.17g}" for v in row))
            lines.append(f"{label},mean," + ",".join(f"{v:.17g}" for v in rows.mean(axis=0)))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [f"{key}={value}" for key, value in sorted(self.metadata.items())]
        for label in self.per_image:
            means = self.means(label)
            lines.extend(f"{label}.{c}={means[c]:.17g}" for c in self.columns)
        return "\n".join(lines) + "\n"


def evaluate_registration(pairs, fields) -> MetricReport:
    """Registered-vs-fixed metrics plus the misaligned baseline row.

    ``pairs`` is a sequence of PhantomPair (or (moving, fixed) Image tuples)
    and ``fields`` the estimated deformation for each pair's moving image.
    """
    if len(pairs) != len(fields):
        raise ValueError("need one field per pair")
    baseline, registered = [], []
    for pair, est in zip(pairs, fields):
        moving, fixed = (pair.pat, pair.mri) if hasattr(pair, "pat") else pair
        reg = warp(moving, est) if isinstance(est, DeformationField) else est
        baseline.append([mutual_information(moving, fixed),
                         normalized_mutual_information(moving, fixed),
                         normalized_cross_correlation(moving, fixed)])
        registered.append([mutual_information(reg, fixed),
                           normalized_mutual_information(reg, fixed),
                           normalized_cross_correlation(reg, fixed)])
    return MetricReport(
        columns=REGISTRATION_COLUMNS,
        per_image={"misaligned": np.array(baseline), "registered": np.array(registered)},
    )


def fusion_metrics_row(fused, a, b) -> list:
    """All eight fusion metrics for one fused image, in report column order."""
    return [
        fusion_mi(fused, a, b),
        vif_pair_mean(fused, a, b),
        qabf(fused, a, b),
        spatial_frequency(fused),
        0.5 * (ssim(fused, a) + ssim(fused, b)),
        fmi(fused, a, b, "pixel"),
        fmi(fused, a, b, "dct"),
        fmi(fused, a, b, "wavelet"),
    ]


def evaluate_fusion(fused_set, sources, label: str = "fused") -> MetricReport:
    """Fusion metric table for a set of fused images and their source pairs."""
    if len(fused_set) != len(sources):
        raise ValueError("need one source pair per fused image")
    rows = [fusion_metrics_row(fused, a, b) for fused, (a, b) in zip(fused_set, sources)]
    return MetricReport(columns=FUSION_COLUMNS, per_image={label: np.array(rows)})
