"""On-disk phantom datasets: one directory per pair plus a checksummed
manifest."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .image import Image, PhantomPair, load_image, make_phantom_dataset, save_image
from .warpfield import load_field, save_field

MANIFEST_NAME = "manifest.json"
PAIR_FILES = ("pat.r32f", "mri.r32f", "mri_aligned.r32f", "true_field.f32d")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(pairs, out_dir) -> Path:
    """Write pairs (images, ground-truth fields) and a manifest with checksums."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, pair in enumerate(pairs):
        pair_dir = out_dir / f"pair_{i:04d}"
        pair_dir.mkdir(exist_ok=True)
        save_image(pair.pat, pair_dir / "pat.r32f")
        save_image(pair.mri, pair_dir / "mri.r32f")
        save_image(pair.mri_aligned, pair_dir / "mri_aligned.r32f")
        save_field(pair.true_field, pair_dir / "true_field.f32d")
        save_image(pair.pat, pair_dir / "pat.png")
        save_image(pair.mri, pair_dir / "mri.png")
        entries.append({
            "dir": pair_dir.name,
            "seed": pair.seed,
            "checksums": {name: _sha256(pair_dir / name) for name in PAIR_FILES},
        })
    manifest = {"count": len(entries), "pairs": entries}
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return out_dir / MANIFEST_NAME


def generate_dataset(seed: int, count: int, size: int, deform_magnitude: float, out_dir) -> Path:
    pairs = make_phantom_dataset(seed, count, size, size, deform_magnitude)
    return save_dataset(pairs, out_dir)


def load_dataset(data_dir, verify: bool = False) -> list:
    """Load a dataset directory back into PhantomPair objects."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {data_dir}")
    manifest = json.loads(manifest_path.read_text())
    if verify:
        verify_dataset(data_dir)
    pairs = []
    for entry in manifest["pairs"]:
        pair_dir = data_dir / entry["dir"]
        pairs.append(PhantomPair(
            pat=load_image(pair_dir / "pat.r32f", "PAT"),
            mri=load_image(pair_dir / "mri.r32f", "MRI"),
            mri_aligned=load_image(pair_dir / "mri_aligned.r32f", "MRI"),
            true_field=load_field(pair_dir / "true_field.f32d"),
            seed=entry["seed"],
        ))
    return pairs


def verify_dataset(data_dir) -> None:
    """Recompute checksums and compare against the manifest."""
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / MANIFEST_NAME).read_text())
    for entry in manifest["pairs"]:
        pair_dir = data_dir / entry["dir"]
        for name, recorded in entry["checksums"].items():
            actual = _sha256(pair_dir / name)
            if actual != recorded:
                raise ValueError(f"checksum mismatch for {pair_dir / name}")
