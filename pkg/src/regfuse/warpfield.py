"""Deformation fields, differentiable spatial resampling, field algebra, and
image gradient operators.

Fields store per-pixel displacements (dx, dy) in pixel units with the
additive convention ``output(x, y) = input(x + dx, y + dy)``. Sampling is
bilinear with clamp-to-edge borders. Tensor-level functions (suffix
``_tensor``) operate on batched ``(B, C, H, W)`` / ``(B, 2, H, W)`` tensors
and are differentiable; the dataclass wrappers mirror them for numpy users.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .image import Image

F32D_MAGIC = b"F32D"


@dataclass(frozen=True)
class DeformationField:
    """Per-pixel (dx, dy) displacement grid in pixels, shape (H, W, 2)."""

    displacements: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.displacements, dtype=np.float32)
        if d.ndim != 3 or d.shape[2] != 2:
            raise ValueError(f"expected shape (H, W, 2), got {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("deformation field contains non-finite entries")
        object.__setattr__(self, "displacements", d)

    @property
    def height(self) -> int:
        return self.displacements.shape[0]

    @property
    def width(self) -> int:
        return self.displacements.shape[1]

    @classmethod
    def zero(cls, h: int, w: int) -> "DeformationField":
        return cls(np.zeros((h, w, 2), dtype=np.float32))


# ---------------------------------------------------------------------------
# Tensor-level core (differentiable)
# ---------------------------------------------------------------------------

def warp_tensor(img: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear warp of (B, C, H, W) by (B, 2, H, W) pixel displacements.

    Out-of-bounds samples clamp to the border. A zero flow reproduces the
    input bit-exactly.
    """
    if img.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError("warp_tensor expects (B, C, H, W) image and (B, 2, H, W) flow")
    if img.shape[0] != flow.shape[0] or img.shape[-2:] != flow.shape[-2:]:
        raise ValueError(f"shape mismatch: image {tuple(img.shape)} vs flow {tuple(flow.shape)}")
    b, c, h, w = img.shape
    dtype = img.dtype
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=img.device),
        torch.arange(w, dtype=dtype, device=img.device),
        indexing="ij",
    )
    px = (gx + flow[:, 0]).clamp(0, w - 1)
    py = (gy + flow[:, 1]).clamp(0, h - 1)
    x0f = px.floor()
    y0f = py.floor()
    wx = (px - x0f).unsqueeze(1)
    wy = (py - y0f).unsqueeze(1)
    x0 = x0f.long().clamp(0, w - 1)
    y0 = y0f.long().clamp(0, h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = img.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    top = v00 + wx * (v01 - v00)
    bottom = v10 + wx * (v11 - v10)
    return top + wy * (bottom - top)


def upsample_flow(flow: torch.Tensor, h2: int, w2: int) -> torch.Tensor:
    """Bilinear-resize a flow and rescale displacements to the new pixel units."""
    h, w = flow.shape[-2:]
    if h2 < h or w2 < w:
        raise ValueError(f"upsample target {h2}x{w2} smaller than source {h}x{w}")
    if (h2, w2) == (h, w):
        return flow
    out = F.interpolate(flow, size=(h2, w2), mode="bilinear", align_corners=True)
    scale = torch.tensor([w2 / w, h2 / h], dtype=flow.dtype, device=flow.device)
    return out * scale.view(1, 2, 1, 1)


def compose_flow(outer: torch.Tensor, inner: torch.Tensor) -> torch.Tensor:
    """result(x) = inner(x) + outer(x + inner(x))."""
    if outer.shape != inner.shape:
        raise ValueError(f"shape mismatch: {tuple(outer.shape)} vs {tuple(inner.shape)}")
    return inner + warp_tensor(outer, inner)


def smoothness_tensor(flow: torch.Tensor) -> torch.Tensor:
    """Mean absolute forward difference of each displacement channel along each axis."""
    dh = (flow[:, :, :, 1:] - flow[:, :, :, :-1]).abs()
    dv = (flow[:, :, 1:, :] - flow[:, :, :-1, :]).abs()
    return dh.mean(dim=(0, 2, 3)).sum() + dv.mean(dim=(0, 2, 3)).sum()


_SOBEL_X = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]


def sobel_tensor(img: torch.Tensor) -> torch.Tensor:
    """|Gx| + |Gy| of 3x3 Sobel responses with replicate padding."""
    if img.ndim != 4:
        raise ValueError("sobel_tensor expects (B, C, H, W)")
    c = img.shape[1]
    kx = torch.tensor(_SOBEL_X, dtype=img.dtype, device=img.device)
    ky = kx.t()
    weight = torch.stack([kx, ky]).unsqueeze(1)  # (2, 1, 3, 3)
    weight = weight.repeat(c, 1, 1, 1)
    padded = F.pad(img, (1, 1, 1, 1), mode="replicate")
    resp = F.conv2d(padded, weight, groups=c)
    gx, gy = resp[:, 0::2], resp[:, 1::2]
    return gx.abs() + gy.abs()


# ---------------------------------------------------------------------------
# Dataclass wrappers
# ---------------------------------------------------------------------------

def image_to_tensor(img: Image, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(img.pixels).to(dtype).unsqueeze(0).unsqueeze(0)


def tensor_to_image(t: torch.Tensor, modality: str = "PAT") -> Image:
    arr = t.detach().squeeze(0).squeeze(0).cpu().numpy().astype(np.float32)
    return Image(np.clip(arr, 0.0, 1.0), modality)


def field_to_tensor(field: DeformationField, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(field.displacements).to(dtype).permute(2, 0, 1).unsqueeze(0)


def tensor_to_field(t: torch.Tensor) -> DeformationField:
    arr = t.detach().squeeze(0).permute(1, 2, 0).cpu().numpy().astype(np.float32)
    return DeformationField(arr)


def warp(img: Image, field: DeformationField) -> Image:
    if (field.height, field.width) != (img.height, img.width):
        raise ValueError("field shape must match the image")
    out = warp_tensor(image_to_tensor(img), field_to_tensor(field))
    return tensor_to_image(out, img.modality)


def negate_field(field: DeformationField) -> DeformationField:
    return DeformationField(-field.displacements)


def upsample_field(field: DeformationField, h2: int, w2: int) -> DeformationField:
    return tensor_to_field(upsample_flow(field_to_tensor(field), h2, w2))


def compose_fields(outer: DeformationField, inner: DeformationField) -> DeformationField:
    if outer.displacements.shape != inner.displacements.shape:
        raise ValueError("fields must share the same shape")
    return tensor_to_field(compose_flow(field_to_tensor(outer), field_to_tensor(inner)))


def smoothness_loss(field: DeformationField) -> float:
    return float(smoothness_tensor(field_to_tensor(field, torch.float64)))


def sobel_gradient(img: Image) -> np.ndarray:
    """Sobel gradient magnitude map (non-negative, not range-limited)."""
    out = sobel_tensor(image_to_tensor(img))
    return out.squeeze(0).squeeze(0).numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# Field file format: "F32D" magic + H + W + dx plane + dy plane (float32 LE)
# ---------------------------------------------------------------------------

def save_field(field: DeformationField, path) -> None:
    h, w = field.height, field.width
    with open(path, "wb") as fh:
        fh.write(F32D_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(field.displacements[:, :, 0], dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(field.displacements[:, :, 1], dtype="<f4").tobytes())


def load_field(path) -> DeformationField:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != F32D_MAGIC:
        raise ValueError(f"{path}: bad magic, not an F32D file")
    h, w = struct.unpack("<II", blob[4:12])
    expected = 12 + 8 * h * w
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated F32D payload ({len(blob)} != {expected} bytes)")
    planes = np.frombuffer(blob[12:], dtype="<f4").reshape(2, h, w)
    return DeformationField(np.stack([planes[0], planes[1]], axis=2))
