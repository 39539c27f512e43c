"""Image container, file I/O, augmentation, and the synthetic phantom-pair generator.

Images are single-channel float grids in [0, 1] tagged with a modality.
The phantom generator renders a shared anatomy latent as a PAT-like view
(bright vessel curves, speckle texture, dark background) and an MRI-like
view (smooth soft-tissue fills, clear edges), then misaligns the MRI view
with a smooth random deformation of controlled magnitude.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

MODALITIES = ("PAT", "MRI", "PSEUDO_MRI", "FUSED")
MIN_SIZE = 8

R32F_MAGIC = b"R32F"


@dataclass(frozen=True)
class Image:
    """Single-channel float image with pixels in [0, 1]."""

    pixels: np.ndarray
    modality: str = "PAT"

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ValueError(f"expected a 2-d pixel grid, got shape {px.shape}")
        h, w = px.shape
        if h < MIN_SIZE or w < MIN_SIZE:
            raise ValueError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
        if not np.isfinite(px).all():
            raise ValueError("image contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}, expected one of {MODALITIES}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_modality(self, modality: str) -> "Image":
        return Image(self.pixels, modality)


@dataclass(frozen=True)
class PhantomPair:
    """A misaligned phantom pair with its ground-truth deformation.

    ``mri`` is the misaligned member: warping ``mri_aligned`` by
    ``true_field`` reproduces it exactly (by construction).
    """

    pat: Image
    mri: Image
    mri_aligned: Image
    true_field: "DeformationField"  # noqa: F821 - defined in warpfield
    seed: int

    def __post_init__(self):
        if self.pat.pixels.shape != self.mri.pixels.shape:
            raise ValueError("pat and mri must share the same H x W")
        if self.true_field.displacements.shape[:2] != self.pat.pixels.shape:
            raise ValueError("true_field shape must match the images")


# ---------------------------------------------------------------------------
# File I/O
#
# Two formats: 8-bit grayscale PNG for viewing, and a raw float32 grid for
# exactness ("R32F" magic, two little-endian uint32 dims, row-major payload).
# ---------------------------------------------------------------------------

def load_image(path, modality: str = "PAT") -> Image:
    """Load a PNG or raw float32 image; 8-bit value v maps to v / 255."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if path.suffix.lower() == ".r32f":
        return Image(_read_r32f(path), modality)
    with PILImage.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"expected 8-bit grayscale input, got mode {im.mode!r}")
        arr = np.asarray(im, dtype=np.uint8)
    return Image(arr.astype(np.float32) / np.float32(255.0), modality)


def save_image(img: Image, path) -> None:
    """Write a PNG (8-bit quantized) or raw float32 grid (bit-exact)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".r32f":
        _write_r32f(img.pixels, path)
    elif suffix == ".png":
        quantized = np.round(img.pixels.astype(np.float64) * 255.0).astype(np.uint8)
        PILImage.fromarray(quantized, mode="L").save(path)
    else:
        raise ValueError(f"unsupported image format {suffix!r} (use .png or .r32f)")


def _read_r32f(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if blob[:4] != R32F_MAGIC:
        raise ValueError(f"{path}: bad magic, not an R32F file")
    h, w = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * h * w
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated R32F payload ({len(blob)} != {expected} bytes)")
    return np.frombuffer(blob[12:], dtype="<f4").reshape(h, w).copy()


def _write_r32f(pixels: np.ndarray, path: Path) -> None:
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(R32F_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(pixels, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# Augmentation and resampling
# ---------------------------------------------------------------------------

AUGMENT_OPS = ("rot90", "rot180", "rot270", "flip_h", "flip_v")


def augment(img: Image, op: str) -> Image:
    """Apply a rotation/flip. Pixel multiset is preserved."""
    px = img.pixels
    if op == "rot90":
        out = np.rot90(px, 1)
    elif op == "rot180":
        out = np.rot90(px, 2)
    elif op == "rot270":
        out = np.rot90(px, 3)
    elif op == "flip_h":
        out = px[:, ::-1]
    elif op == "flip_v":
        out = px[::-1, :]
    else:
        raise ValueError(f"unknown augment op {op!r}, expected one of {AUGMENT_OPS}")
    return Image(np.ascontiguousarray(out), img.modality)


def resize(img: Image, h: int, w: int) -> Image:
    """Bilinear resample to h x w (corner-aligned sampling grid)."""
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValueError(f"degenerate target size {h}x{w}")
    src = img.pixels.astype(np.float64)
    sh, sw = src.shape
    if (h, w) == (sh, sw):
        return Image(img.pixels.copy(), img.modality)
    out = _bilinear_axis(_bilinear_axis(src, h, axis=0), w, axis=1)
    return Image(np.clip(out, 0.0, 1.0).astype(np.float32), img.modality)


def _bilinear_axis(arr: np.ndarray, new_len: int, axis: int) -> np.ndarray:
    old_len = arr.shape[axis]
    if new_len == old_len:
        return arr
    pos = np.linspace(0.0, old_len - 1.0, new_len)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, old_len - 1)
    frac = pos - lo
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1, 1]
    shape[axis] = new_len
    frac = frac.reshape(shape)
    return a + frac * (b - a)


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------

def make_phantom_pair(seed: int, h: int, w: int, deform_magnitude: float) -> PhantomPair:
    """Deterministically render a misaligned PAT/MRI phantom pair.

    The shared latent is a body ellipse containing 3-6 elliptical Gaussian
    "organs". The MRI view is warped by a smooth random field whose maximum
    displacement norm equals ``deform_magnitude`` (in pixels).
    """
    from .warpfield import DeformationField, warp  # local import avoids a cycle

    if deform_magnitude < 0:
        raise ValueError("deform_magnitude must be >= 0")
    rng = np.random.default_rng(seed)

    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    body, organs = _sample_anatomy(rng, h, w, yy, xx)

    mri_px = _render_mri(rng, body, organs)
    pat_px = _render_pat(rng, h, w, body, organs)

    field = _sample_deformation(rng, h, w, deform_magnitude)
    true_field = DeformationField(field)

    pat = Image(pat_px, "PAT")
    mri_aligned = Image(mri_px, "MRI")
    mri = warp(mri_aligned, true_field)
    return PhantomPair(pat=pat, mri=mri, mri_aligned=mri_aligned, true_field=true_field, seed=seed)


def make_phantom_dataset(seed: int, count: int, h: int, w: int, deform_magnitude: float) -> list[PhantomPair]:
    """Generate ``count`` independent phantom pairs from a master seed."""
    pair_seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)
    return [make_phantom_pair(int(s), h, w, deform_magnitude) for s in pair_seeds]


def _sample_anatomy(rng, h, w, yy, xx):
    cy = h / 2 + rng.uniform(-0.04, 0.04) * h
    cx = w / 2 + rng.uniform(-0.04, 0.04) * w
    ry = rng.uniform(0.33, 0.42) * h
    rx = rng.uniform(0.33, 0.42) * w
    theta = rng.uniform(0.0, np.pi)
    u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
    v = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
    d2 = (u / ry) ** 2 + (v / rx) ** 2
    body = 1.0 / (1.0 + np.exp((d2 - 1.0) / 0.06))

    organs = []
    for _ in range(int(rng.integers(3, 7))):
        oy = cy + rng.uniform(-0.6, 0.6) * ry
        ox = cx + rng.uniform(-0.6, 0.6) * rx
        sy = rng.uniform(0.06, 0.14) * min(h, w)
        sx = rng.uniform(0.06, 0.14) * min(h, w)
        ang = rng.uniform(0.0, np.pi)
        ou = (yy - oy) * np.cos(ang) + (xx - ox) * np.sin(ang)
        ov = -(yy - oy) * np.sin(ang) + (xx - ox) * np.cos(ang)
        d2 = (ou / sy) ** 2 + (ov / sx) ** 2
        # thin boundary ring, shared by both renderings (~1-2 px wide)
        rim = np.exp(-((np.sqrt(d2) - 1.0) ** 2) * min(sy, sx) ** 2 / 2.0) * (body > 0.5)
        organs.append({
            "region": (d2 < 1.0) & (body > 0.5),
            "rim": rim,
            "center": (oy, ox),
            "axes": (sy, sx),
            "mri_level": rng.uniform(0.50, 0.90),
            "pat_level": rng.uniform(0.12, 0.35),
        })
    return body, organs


def _render_mri(rng, body, organs):
    mri = 0.06 + 0.24 * body
    rims = np.zeros_like(body)
    for organ in organs:
        mri = np.where(organ["region"], np.maximum(mri, organ["mri_level"]), mri)
        rims = np.maximum(rims, organ["rim"])
    mri = gaussian_filter(mri, 0.8)
    # unsharp masking keeps the soft-tissue boundaries crisp
    mri = mri + 0.6 * (mri - gaussian_filter(mri, 2.0)) + 0.30 * rims
    return np.clip(mri, 0.0, 1.0).astype(np.float32)


def _render_pat(rng, h, w, body, organs):
    pat = 0.02 + 0.06 * body
    rims = np.zeros((h, w))
    vessels = np.zeros((h, w))
    for organ in organs:
        pat = np.where(organ["region"], np.maximum(pat, organ["pat_level"]), pat)
        rims = np.maximum(rims, organ["rim"])
        oy, ox = organ["center"]
        sy, sx = organ["axes"]
        for _ in range(int(rng.integers(1, 4))):
            vessels = np.maximum(vessels, _draw_curve(rng, h, w, oy, ox, sy, sx))
    pat = gaussian_filter(pat, 0.6) + 0.45 * rims
    vessels = gaussian_filter(vessels, 0.7)
    if vessels.max() > 0:
        vessels = vessels / vessels.max()
    pat = np.maximum(pat, (0.75 + 0.2 * rng.uniform()) * vessels * (body > 0.3))

    speckle = gaussian_filter(rng.standard_normal((h, w)), 0.6)
    speckle = speckle / max(speckle.std(), 1e-12)
    pat = pat * (1.0 + 0.30 * speckle * (body > 0.3))
    return np.clip(pat, 0.0, 1.0).astype(np.float32)


def _draw_curve(rng, h, w, oy, ox, sy, sx):
    """Rasterize one quadratic Bezier arc inside an organ's extent."""
    pts = np.stack([
        np.array([oy, ox]) + rng.uniform(-1.0, 1.0, size=2) * np.array([sy, sx]),
        np.array([oy, ox]) + rng.uniform(-1.0, 1.0, size=2) * np.array([sy, sx]),
        np.array([oy, ox]) + rng.uniform(-1.0, 1.0, size=2) * np.array([sy, sx]),
    ])
    t = np.linspace(0.0, 1.0, 4 * max(h, w))[:, None]
    curve = (1 - t) ** 2 * pts[0] + 2 * t * (1 - t) * pts[1] + t**2 * pts[2]
    iy = np.clip(np.round(curve[:, 0]).astype(np.int64), 0, h - 1)
    ix = np.clip(np.round(curve[:, 1]).astype(np.int64), 0, w - 1)
    canvas = np.zeros((h, w))
    canvas[iy, ix] = 1.0
    return canvas


def _sample_deformation(rng, h, w, magnitude):
    """Sum of 3 Gaussian bump displacements, rescaled to a max norm of ``magnitude``."""
    field = np.zeros((h, w, 2))
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    for _ in range(3):
        by = rng.uniform(0.2, 0.8) * h
        bx = rng.uniform(0.2, 0.8) * w
        sigma = rng.uniform(0.10, 0.25) * min(h, w)
        amp = rng.standard_normal(2)
        bump = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2.0 * sigma**2))
        field[:, :, 0] += amp[0] * bump
        field[:, :, 1] += amp[1] * bump
    if magnitude == 0.0:
        return np.zeros((h, w, 2), dtype=np.float32)
    max_norm = np.sqrt((field**2).sum(axis=2)).max()
    if max_norm > 0:
        field *= magnitude / max_norm
    return field.astype(np.float32)
