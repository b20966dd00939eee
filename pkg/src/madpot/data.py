"""Synthetic anomaly dataset, binary PGM images and JSONL manifests.

On-disk layout written by :func:`generate_dataset`::

    out_dir/images/NNNN.pgm
    out_dir/masks/NNNN.pgm      (only with masks)
    out_dir/manifest.jsonl

Manifest labels use the dataset convention: 1 normal, 0 abnormal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import InvalidConfigError, InvalidInputError, ParseError
from .numkit import Rng

__all__ = [
    "SyntheticSpec",
    "Sample",
    "Record",
    "NORMAL",
    "ABNORMAL",
    "synth_normal",
    "synth_abnormal",
    "generate_dataset",
    "read_pgm",
    "write_pgm",
    "read_manifest",
    "write_manifest",
    "load_samples",
]

NORMAL = 1
ABNORMAL = 0


@dataclass(frozen=True)
class SyntheticSpec:
    image_side: int = 64
    blur_passes: int = 3
    blur_radius: int = 2
    blob_count_range: tuple = (1, 3)
    blob_radius_range: tuple = (4.0, 10.0)
    blob_intensity_range: tuple = (0.4, 0.7)
    noise_amplitude: float = 0.3

    def __post_init__(self):
        for name in ("blob_count_range", "blob_radius_range", "blob_intensity_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidConfigError(f"{name} is empty: {lo} > {hi}")
        if self.image_side < 1 or self.blur_passes < 0 or self.blur_radius < 0:
            raise InvalidConfigError("image_side must be positive, blur settings nonnegative")
        if self.blob_count_range[0] < 1:
            raise InvalidConfigError("abnormal images need at least one blob")


@dataclass
class Sample:
    image: np.ndarray
    label: int
    mask: np.ndarray | None = None


@dataclass(frozen=True)
class Record:
    image: str
    label: int
    mask: str | None = None


# --- synthesis ---------------------------------------------------------------


def _background(spec, rng):
    side = spec.image_side
    noise = rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, (side, side))
    for _ in range(spec.blur_passes):
        noise = uniform_filter(noise, size=2 * spec.blur_radius + 1, mode="nearest")
    return 0.5 + noise


def synth_normal(spec, rng):
    """Smooth noise texture around 0.5; returns ``(image, mask)``."""
    img = np.clip(_background(spec, rng), 0.0, 1.0)
    return img, np.zeros_like(img)


def synth_abnormal(spec, rng):
    """Background plus additive axis-aligned elliptical blobs; returns ``(image, mask)``."""
    side = spec.image_side
    img = _background(spec, rng)
    mask = np.zeros((side, side))
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    for _ in range(rng.integers(*spec.blob_count_range)):
        cy, cx = rng.uniform(0.0, side, 2)
        ry, rx = rng.uniform(*spec.blob_radius_range, 2)
        amp = rng.uniform(*spec.blob_intensity_range)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img = img + amp * inside
        mask[inside] = 1.0
    return np.clip(img, 0.0, 1.0), mask


def generate_dataset(spec, n_normal, n_abnormal, seed, out_dir, with_masks=True):
    """Write ``n_normal`` then ``n_abnormal`` images and return their records.

    Output depends only on ``(spec, n_normal, n_abnormal, seed)``.
    """
    if n_normal < 0 or n_abnormal < 0:
        raise InvalidInputError("sample counts must be nonnegative")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if with_masks:
        (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    records = []
    labels = [NORMAL] * n_normal + [ABNORMAL] * n_abnormal
    for i, label in enumerate(labels):
        img, mask = synth_normal(spec, rng) if label == NORMAL else synth_abnormal(spec, rng)
        name = f"{i:04d}.pgm"
        write_pgm(out / "images" / name, img)
        mask_rel = None
        if with_masks:
            write_pgm(out / "masks" / name, mask)
            mask_rel = f"masks/{name}"
        records.append(Record(image=f"images/{name}", label=label, mask=mask_rel))
    write_manifest(out / "manifest.jsonl", records)
    return records


# --- PGM ---------------------------------------------------------------------


def write_pgm(path, image):
    """Binary P5, maxval 255; values in [0, 1] are rounded half-up."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise InvalidInputError("PGM images must be 2-D")
    q = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def _header_tokens(data, count):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and (chr(data[pos]).isspace() or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < n and data[pos] not in (10, 13):
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise ParseError(f"truncated PGM header at byte {pos}")
        start = pos
        while pos < n and not chr(data[pos]).isspace():
            pos += 1
        tokens.append((data[start:pos].decode("ascii", "replace"), start))
    return tokens, pos + 1


def read_pgm(path):
    """Read a binary (P5) 8-bit PGM into floats ``v / 255``."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        if data[:2] in (b"P2", b"P1", b"P3", b"P4", b"P6"):
            raise ParseError(f"{path}: unsupported PNM variant {data[:2].decode()} at byte 0 (only P5)")
        raise ParseError(f"{path}: bad magic at byte 0, expected P5")
    tokens, offset = _header_tokens(data[2:], 3)
    values = []
    for text, pos in tokens:
        if not text.isdigit():
            raise ParseError(f"{path}: expected integer at byte {pos + 2}, got {text!r}")
        values.append(int(text))
    w, h, maxval = values
    if maxval != 255:
        raise ParseError(f"{path}: maxval {maxval} at byte {tokens[2][1] + 2} unsupported (need 255)")
    if w < 1 or h < 1:
        raise ParseError(f"{path}: empty image {w}x{h}")
    start = offset + 2
    payload = data[start : start + w * h]
    if len(payload) < w * h:
        raise ParseError(f"{path}: truncated payload at byte {start + len(payload)}, need {w * h} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# --- manifests ---------------------------------------------------------------


def write_manifest(path, records):
    lines = []
    for r in records:
        obj = {"image": r.image}
        if r.mask is not None:
            obj["mask"] = r.mask
        obj["label"] = r.label
        lines.append(json.dumps(obj))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path):
    """Parse a JSONL manifest; errors name the offending line."""
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict) or "image" not in obj or "label" not in obj:
            raise ParseError(f"{path}:{lineno}: record needs 'image' and 'label'")
        label = obj["label"]
        if isinstance(label, bool) or label not in (0, 1):
            raise ParseError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
        records.append(Record(image=str(obj["image"]), label=int(label), mask=obj.get("mask")))
    return records


def load_samples(manifest_path):
    """Load every record of a manifest; relative paths resolve against its folder."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    samples = []
    for r in read_manifest(manifest_path):
        image = read_pgm(root / r.image)
        mask = None
        if r.mask is not None:
            mask = (read_pgm(root / r.mask) > 0.5).astype(np.float64)
        samples.append(Sample(image=image, label=r.label, mask=mask))
    return samples
