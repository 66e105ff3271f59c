"""Synthetic two-domain segmentation tasks.

Each image holds one to three ring structures: a rotated outer ellipse
(class 1) around a concentric inner core (class 2) on background (class 0).
Source images paint the classes at well-separated intensities plus Gaussian
noise. Target images run the clean rendering through an intensity transform
first, which is what creates the domain gap:

    optional inversion -> affine a*x + b -> clamp -> gamma exponent
    -> noise -> clamp

Every sample is generated from a counter-based RNG keyed by (seed, domain,
index), so sample i is bit-identical no matter the order, count, or platform
of generation.

Datasets live on disk as img/<id>.tns (float32, (1,1,H,W)) and
msk/<id>.tns (uint8, (1,1,H,W)) plus a manifest.txt of space-separated
relative path pairs.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError
from .seeding import CODE_SOURCE_DATA, CODE_TARGET_DATA, derive_rng
from .tensor import load_tns, save_tns

CLASS_COUNT = 3


@dataclass
class DataSpec:
    size: int = 64
    min_structures: int = 1
    max_structures: int = 3
    class_means: tuple = (0.25, 0.55, 0.85)
    mean_jitter: float = 0.02
    noise_sd: float = 0.04
    tgt_invert: bool = False
    tgt_affine_a: float = 0.40
    tgt_affine_b: float = 0.5
    tgt_gamma: float = 2.6
    tgt_noise_sd: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.size < 8 or self.size % 8:
            raise ContractError(f"size must be a multiple of 8 and >= 8, "
                                f"got {self.size}")
        if not 1 <= self.min_structures <= self.max_structures:
            raise ContractError("need 1 <= min_structures <= max_structures")
        if len(self.class_means) != CLASS_COUNT:
            raise ContractError(f"class_means needs {CLASS_COUNT} entries")
        if self.tgt_gamma <= 0:
            raise ContractError(f"gamma exponent must be positive, "
                                f"got {self.tgt_gamma}")
        if self.noise_sd < 0 or self.tgt_noise_sd < 0:
            raise ContractError("noise levels must be non-negative")


def _geometry(rng, spec):
    size = spec.size
    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    count = int(rng.integers(spec.min_structures, spec.max_structures + 1))
    for _ in range(count):
        cx = rng.uniform(0.25, 0.75) * size
        cy = rng.uniform(0.25, 0.75) * size
        ax = rng.uniform(0.14, 0.26) * size
        ay = rng.uniform(0.14, 0.26) * size
        theta = rng.uniform(0.0, np.pi)
        core = rng.uniform(0.55, 0.75)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        r2 = (u / ax) ** 2 + (v / ay) ** 2
        mask[r2 <= 1.0] = 1
        mask[r2 <= core ** 2] = 2
    return mask


def target_transform(clean, spec):
    """The deterministic part of the domain shift, applied to a clean
    rendering in [0, 1]."""
    y = np.asarray(clean, dtype=np.float64)
    if spec.tgt_invert:
        y = 1.0 - y
    y = spec.tgt_affine_a * y + spec.tgt_affine_b
    y = np.clip(y, 0.0, 1.0)
    return y ** spec.tgt_gamma


def render_sample(spec, domain, index):
    """One (image, mask) pair. image is float32 (1,1,H,W); mask uint8 of the
    same dims. Bit-identical for identical (spec, domain, index)."""
    if domain == "source":
        code, noise = CODE_SOURCE_DATA, spec.noise_sd
    elif domain == "target":
        code, noise = CODE_TARGET_DATA, spec.tgt_noise_sd
    else:
        raise ContractError(f"domain must be 'source' or 'target', got {domain!r}")
    if index < 0:
        raise ContractError(f"sample index must be >= 0, got {index}")
    rng = derive_rng(spec.seed, code, index)
    mask = _geometry(rng, spec)
    means = (np.asarray(spec.class_means, dtype=np.float64)
             + rng.uniform(-spec.mean_jitter, spec.mean_jitter, CLASS_COUNT))
    clean = means[mask]
    if domain == "target":
        clean = target_transform(clean, spec)
    img = clean + rng.normal(0.0, noise, size=clean.shape) if noise > 0 else clean
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img[None, None], mask[None, None]


def write_dataset(root, spec, domain, count, start_index=0):
    """Render ``count`` samples into the on-disk layout. Returns the ids."""
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    os.makedirs(os.path.join(root, "img"), exist_ok=True)
    os.makedirs(os.path.join(root, "msk"), exist_ok=True)
    ids = []
    lines = []
    for i in range(count):
        index = start_index + i
        image_id = f"{domain[:3]}{index:05d}"
        img, msk = render_sample(spec, domain, index)
        save_tns(os.path.join(root, "img", f"{image_id}.tns"), img)
        save_tns(os.path.join(root, "msk", f"{image_id}.tns"), msk)
        lines.append(f"img/{image_id}.tns msk/{image_id}.tns")
        ids.append(image_id)
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return ids


@dataclass
class Dataset:
    root: str
    ids: list
    images: np.ndarray
    masks: np.ndarray = field(default=None)


def load_dataset(root, need_masks=True):
    """Load a dataset directory into memory.

    With ``need_masks=False`` the mask files are never opened; use that for
    adaptation, where target labels must stay out of reach of the optimiser.
    """
    manifest = os.path.join(root, "manifest.txt")
    if not os.path.isfile(manifest):
        raise DataError(f"{root}: no manifest.txt")
    ids, images, masks = [], [], []
    with open(manifest) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{manifest}:{ln}: expected two paths, got "
                                f"{len(parts)}")
            img_rel, msk_rel = parts
            img = load_tns(os.path.join(root, img_rel))
            if img.dtype != np.float32 or img.ndim != 4 or img.shape[:2] != (1, 1):
                raise DataError(f"{img_rel}: images must be float32 (1,1,H,W)")
            images.append(img)
            if need_masks:
                msk = load_tns(os.path.join(root, msk_rel))
                if msk.dtype != np.uint8 or msk.shape != img.shape:
                    raise DataError(f"{msk_rel}: masks must be uint8 with "
                                    f"image dims")
                masks.append(msk)
            ids.append(os.path.splitext(os.path.basename(img_rel))[0])
    if not ids:
        raise DataError(f"{manifest}: empty manifest")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"{root}: inconsistent image dims {sorted(shapes)}")
    return Dataset(root=root, ids=ids,
                   images=np.concatenate(images, axis=0),
                   masks=np.concatenate(masks, axis=0) if need_masks else None)
