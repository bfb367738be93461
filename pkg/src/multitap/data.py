"""Datasets and deterministic augmentations.

Images are channel-last uint8 in storage and converted to normalized float32
arrays by the augmentation/eval transforms.  All randomness is supplied
through explicit seeds (see :mod:`multitap.seeding`); there is no hidden
global RNG.

The synthetic dataset draws one solid shape (class-coded colour and form)
over uniform noise, with randomized position and scale.  Classes are
linearly separable from mean-pooled pixel statistics by construction, which
the test suite verifies with a least-squares oracle classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import derive_seed


class EmptyDatasetError(ValueError):
    pass


class UnreadableImageError(ValueError):
    pass


_IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}

# 16 well-separated RGB anchors for synthetic classes.
_PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25),
        (145, 30, 180), (70, 240, 240), (245, 130, 48), (240, 50, 230),
        (0, 0, 128), (128, 128, 0), (0, 128, 128), (170, 110, 40),
        (230, 190, 255), (128, 0, 0), (170, 255, 195), (60, 60, 60),
    ],
    dtype=np.uint8,
)


@dataclass
class ImageFolderDataset:
    """Class-per-subdirectory image tree with deterministic ordering."""

    paths: list[Path]
    labels: np.ndarray
    class_names: list[str]
    image_side: int | None = None

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def image(self, index: int) -> np.ndarray:
        path = self.paths[index]
        try:
            with Image.open(path) as im:
                return np.asarray(im.convert("RGB"))
        except Exception as exc:
            raise UnreadableImageError(f"cannot read image {path}") from exc


def load_image_folder(root: str | Path) -> ImageFolderDataset:
    """Scan ``root/<class>/<file>`` into a dataset.

    Ordering is lexicographic by class name then file name, and labels follow
    the sorted class order, so two scans of the same tree are identical.
    """
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    paths: list[Path] = []
    labels: list[int] = []
    for label, cname in enumerate(classes):
        files = sorted(
            p for p in (root / cname).iterdir()
            if p.is_file() and p.suffix.lower() in _IMAGE_EXTENSIONS
        )
        for p in files:
            paths.append(p)
            labels.append(label)
    if not paths:
        raise EmptyDatasetError(f"no images found under {root}")
    return ImageFolderDataset(paths=paths, labels=np.asarray(labels), class_names=classes)


class SyntheticShapesDataset:
    """Procedural class-conditional shape images, deterministic per index."""

    _SHAPES = ("square", "circle", "diamond", "triangle")

    def __init__(self, n: int, classes: int, side: int, seed: int):
        if classes > 16:
            raise ValueError(f"at most 16 classes supported, got {classes}")
        if n < 1:
            raise EmptyDatasetError("synthetic dataset needs n >= 1")
        self.n = n
        self.num_classes = classes
        self.image_side = side
        self.seed = seed
        self.labels = np.arange(n) % classes

    def __len__(self) -> int:
        return self.n

    def image(self, index: int) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(derive_seed(self.seed, 0, index)))
        side = self.image_side
        label = int(self.labels[index])
        img = rng.integers(0, 256, size=(side, side, 3), dtype=np.int64).astype(np.uint8)
        color = _PALETTE[label]
        shape = self._SHAPES[label % len(self._SHAPES)]
        radius = (0.22 + 0.16 * rng.random()) * side
        cx = radius + rng.random() * (side - 2 * radius)
        cy = radius + rng.random() * (side - 2 * radius)
        yy, xx = np.mgrid[0:side, 0:side]
        if shape == "square":
            mask = (np.abs(xx - cx) <= radius * 0.9) & (np.abs(yy - cy) <= radius * 0.9)
        elif shape == "circle":
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
        elif shape == "diamond":
            mask = np.abs(xx - cx) + np.abs(yy - cy) <= radius * 1.2
        else:  # triangle
            mask = (yy >= cy - radius) & (yy <= cy + radius) & (
                np.abs(xx - cx) <= 0.6 * (yy - (cy - radius))
            )
        img[mask] = color
        return img


def synthetic_shapes(n: int, classes: int, side: int, seed: int) -> SyntheticShapesDataset:
    return SyntheticShapesDataset(n=n, classes=classes, side=side, seed=seed)


def _sample_resized_crop(
    rng: np.random.Generator,
    height: int,
    width: int,
    area_range: tuple[float, float],
    aspect_range: tuple[float, float],
) -> tuple[int, int, int, int]:
    """Sample (top, left, crop_h, crop_w) for a random resized crop.

    The area fraction is drawn uniformly from ``area_range``; the aspect
    ratio (w/h) is drawn log-uniformly from ``aspect_range`` intersected
    with the feasible range for that area, which keeps the realised area
    distribution uniform instead of biased by rejection.
    """
    lo, hi = area_range
    area = (lo + rng.random() * (hi - lo)) * height * width
    amin, amax = aspect_range
    # feasibility: crop_w = sqrt(area * a) <= width, crop_h = sqrt(area / a) <= height
    amin = max(amin, area / height**2)
    amax = min(amax, width**2 / area)
    if amin > amax:  # area too large for any in-range aspect; use the closest
        amin = amax = min(max(1.0, area / height**2), width**2 / area)
    a = math.exp(math.log(amin) + rng.random() * (math.log(amax) - math.log(amin)))
    crop_w = min(max(int(math.floor(math.sqrt(area * a) + 0.5)), 1), width)
    crop_h = min(max(int(math.floor(math.sqrt(area / a) + 0.5)), 1), height)
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    return top, left, crop_h, crop_w


def _to_float(img_u8: np.ndarray) -> np.ndarray:
    return img_u8.astype(np.float32) / 255.0


def normalize(img: np.ndarray, mean: tuple[float, ...], std: tuple[float, ...]) -> np.ndarray:
    return (img - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)


def augment_pretrain(
    image_u8: np.ndarray,
    seed: int,
    out_side: int,
    area_range: tuple[float, float] = (0.35, 1.0),
    aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0),
    hflip: bool = True,
    mean: tuple[float, ...] = (0.5, 0.5, 0.5),
    std: tuple[float, ...] = (0.25, 0.25, 0.25),
) -> np.ndarray:
    """Random resized crop (bicubic) + horizontal flip, fully seed-determined.

    Bicubic resampling uses the Catmull-Rom kernel (a = -0.5) with edges
    clamped to the image border, as implemented by Pillow.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    h, w = image_u8.shape[:2]
    top, left, ch, cw = _sample_resized_crop(rng, h, w, area_range, aspect_range)
    do_flip = hflip and rng.random() < 0.5
    pil = Image.fromarray(image_u8)
    crop = pil.crop((left, top, left + cw, top + ch))
    resized = crop.resize((out_side, out_side), Image.BICUBIC)
    arr = _to_float(np.asarray(resized))
    if do_flip:
        arr = arr[:, ::-1].copy()
    return normalize(arr, mean, std)


def _apply_color_jitter(arr: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    # brightness, contrast, saturation factors in [1 - strength, 1 + strength]
    b, c, s = (1.0 - strength + 2.0 * strength * rng.random() for _ in range(3))
    arr = arr * b
    gray = arr.mean(axis=(0, 1, 2), keepdims=True)
    arr = gray + (arr - gray) * c
    per_pixel_gray = arr.mean(axis=2, keepdims=True)
    arr = per_pixel_gray + (arr - per_pixel_gray) * s
    return np.clip(arr, 0.0, 1.0)


def augment_probe(
    image_u8: np.ndarray,
    seed: int,
    out_side: int,
    area_range: tuple[float, float] = (0.3, 1.0),
    aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0),
    jitter: float = 0.4,
    mean: tuple[float, ...] = (0.5, 0.5, 0.5),
    std: tuple[float, ...] = (0.25, 0.25, 0.25),
) -> np.ndarray:
    """Probe-training augmentation: crop + flip + colour jitter."""
    rng = np.random.Generator(np.random.PCG64(seed))
    h, w = image_u8.shape[:2]
    top, left, ch, cw = _sample_resized_crop(rng, h, w, area_range, aspect_range)
    do_flip = rng.random() < 0.5
    pil = Image.fromarray(image_u8)
    crop = pil.crop((left, top, left + cw, top + ch))
    resized = crop.resize((out_side, out_side), Image.BICUBIC)
    arr = _to_float(np.asarray(resized))
    if do_flip:
        arr = arr[:, ::-1].copy()
    if jitter > 0:
        arr = _apply_color_jitter(arr, rng, jitter)
    return normalize(arr, mean, std)


def eval_transform(
    image_u8: np.ndarray,
    out_side: int,
    crop_fraction: float = 0.875,
    mean: tuple[float, ...] = (0.5, 0.5, 0.5),
    std: tuple[float, ...] = (0.25, 0.25, 0.25),
) -> np.ndarray:
    """Deterministic eval view: resize to out_side / crop_fraction, centre crop."""
    resize_side = int(round(out_side / crop_fraction))
    pil = Image.fromarray(image_u8).resize((resize_side, resize_side), Image.BICUBIC)
    off = (resize_side - out_side) // 2
    crop = pil.crop((off, off, off + out_side, off + out_side))
    return normalize(_to_float(np.asarray(crop)), mean, std)
