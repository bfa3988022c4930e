"""Training-time image augmentation: rotate, scale, crop, random erasing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage


class IngestionError(ValueError):
    pass


@dataclass
class AugmentConfig:
    rotation_deg: float = 25.0
    scale_jitter: float = 0.25
    source_size: int = 256
    crop_size: int = 224
    crop: str = "random"  # random | center
    erase_regions: int = 2
    erase_area_range: tuple[float, float] = (0.1, 0.8)
    erase_fill: str = "random_rgb"  # random_rgb | fixed_127
    erase_fill_per_pixel: bool = True
    erase_aspect_range: tuple[float, float] = (0.5, 2.0)
    erase_split_range: tuple[float, float] = (0.3, 0.7)
    erase_split: str = "total"  # total | independent
    erase_max_attempts: int = 50

    def __post_init__(self):
        if self.crop_size > self.source_size:
            raise ValueError(f"crop_size {self.crop_size} exceeds source_size {self.source_size}")
        lo, hi = self.erase_area_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"erase_area_range must lie inside (0, 1), got {self.erase_area_range}")
        if self.erase_regions not in (0, 1, 2):
            raise ValueError("erase_regions must be 0, 1 or 2")
        if self.erase_fill not in ("random_rgb", "fixed_127"):
            raise ValueError(f"unknown erase_fill {self.erase_fill!r}")
        if self.crop not in ("random", "center"):
            raise ValueError(f"unknown crop mode {self.crop!r}")
        if self.erase_split not in ("total", "independent"):
            raise ValueError(f"unknown erase_split {self.erase_split!r}")


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def overlaps(self, other: "Rect") -> bool:
        return (
            self.x < other.x + other.w
            and other.x < self.x + self.w
            and self.y < other.y + other.h
            and other.y < self.y + self.h
        )


@dataclass
class EraseRecord:
    rects: list[Rect] = field(default_factory=list)
    fill: str = "none"

    def total_fraction(self, img_size: int) -> float:
        return sum(r.area for r in self.rects) / float(img_size * img_size)


def _dims_for_area(area: float, aspect: float) -> tuple[int, int]:
    h = int(round(math.sqrt(area * aspect)))
    w = int(round(math.sqrt(area / aspect)))
    return max(w, 1), max(h, 1)


def _strip_fallback(areas: list[float], size: int, lo: float, hi: float) -> list[Rect]:
    # Side-by-side full-height strips: always disjoint and in bounds.
    total = size * size
    widths = [max(1, int(round(a / size))) for a in areas]
    min_w, max_w = math.ceil(lo * total / size), math.floor(hi * total / size)
    while sum(widths) > max_w:
        widths[int(np.argmax(widths))] -= 1
    while sum(widths) < min_w:
        widths[int(np.argmin(widths))] += 1
    rects, x = [], 0
    for w in widths:
        rects.append(Rect(x=x, y=0, w=w, h=size))
        x += w
    return rects


def sample_erase_rects(cfg: AugmentConfig, rng: np.random.Generator, img_size: int) -> list[Rect]:
    """Draw the rectangles to erase on an ``img_size × img_size`` image.

    The total erased fraction is drawn uniformly from ``erase_area_range``;
    with two regions it is split between them. Placement is rejection-sampled;
    after ``erase_max_attempts`` failures the regions shrink to adjacent
    full-height strips of the same total area.
    """
    k = cfg.erase_regions
    if k < 1:
        raise ValueError("sample_erase_rects needs erase_regions >= 1")
    lo, hi = cfg.erase_area_range
    total_px = img_size * img_size
    target = rng.uniform(lo, hi)
    if k == 1:
        fractions = [target]
    elif cfg.erase_split == "total":
        r = rng.uniform(*cfg.erase_split_range)
        fractions = [target * r, target * (1.0 - r)]
    else:
        # Each region's share drawn on its own, then rescaled into the bounds.
        a, b = rng.uniform(lo, hi, size=2) / 2.0
        fractions = [a, b]
    areas = [f * total_px for f in fractions]

    for _ in range(cfg.erase_max_attempts):
        rects = []
        for area in areas:
            aspect = rng.uniform(*cfg.erase_aspect_range)
            w, h = _dims_for_area(area, aspect)
            if w > img_size or h > img_size:
                break
            x = int(rng.integers(0, img_size - w + 1))
            y = int(rng.integers(0, img_size - h + 1))
            rects.append(Rect(x, y, w, h))
        if len(rects) != k:
            continue
        if k == 2 and rects[0].overlaps(rects[1]):
            continue
        frac = sum(r.area for r in rects) / total_px
        if lo <= frac <= hi:
            return rects
    return _strip_fallback(areas, img_size, lo, hi)


def apply_erasing(img: np.ndarray, rects: list[Rect], cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Overwrite ``rects`` in an ``s×s×3`` image holding 0..255 values (returns a copy)."""
    out = img.copy()
    for r in rects:
        region = out[r.y : r.y + r.h, r.x : r.x + r.w, :]
        if cfg.erase_fill == "fixed_127":
            region[...] = 127
        elif cfg.erase_fill_per_pixel:
            region[...] = rng.integers(0, 256, size=region.shape)
        else:
            region[...] = rng.integers(0, 256, size=(1, 1, region.shape[2]))
    return out


def _check_image(image: np.ndarray, size: int) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise IngestionError(f"expected an s×s×3 RGB image, got shape {image.shape}")
    if image.shape[0] < size or image.shape[1] < size:
        raise IngestionError(f"image {image.shape[:2]} is smaller than source size {size}")
    return image


def rotate_and_scale(img: np.ndarray, angle_deg: float, scale: float) -> np.ndarray:
    """Rotate by ``angle_deg`` and zoom by ``scale`` about the centre, keeping the size.

    Pixels that map outside the source take the nearest edge value.
    """
    h, w = img.shape[:2]
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    # affine_transform maps output coords to input coords: in = A @ out + offset.
    a = np.array([[cos, sin], [-sin, cos]]) / scale
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - a @ center
    out = np.empty(img.shape, dtype=np.float32)
    src = img.astype(np.float32)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.affine_transform(src[..., ch], a, offset=offset, order=1, mode="nearest")
    return np.clip(out, 0.0, 255.0)


def _crop(img: np.ndarray, size: int, mode: str, rng: Optional[np.random.Generator]) -> np.ndarray:
    h, w = img.shape[:2]
    if mode == "center" or rng is None:
        y, x = (h - size) // 2, (w - size) // 2
    else:
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
    return img[y : y + size, x : x + size, :]


def augment_train(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, EraseRecord]:
    """Full training pipeline; returns a ``crop×crop×3`` float32 image in [0, 1]."""
    image = _check_image(image, cfg.source_size)
    x = image.astype(np.float32)
    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) if cfg.rotation_deg else 0.0
    scale = rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter) if cfg.scale_jitter else 1.0
    if angle or scale != 1.0:
        x = rotate_and_scale(x, angle, scale)
    x = _crop(x, cfg.crop_size, cfg.crop, rng)
    record = EraseRecord(fill="none")
    if cfg.erase_regions:
        rects = sample_erase_rects(cfg, rng, cfg.crop_size)
        x = apply_erasing(x, rects, cfg, rng)
        record = EraseRecord(rects=rects, fill=cfg.erase_fill)
    return (x / 255.0).astype(np.float32), record


def augment_eval(image: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Deterministic centre crop and scaling to [0, 1]."""
    image = _check_image(image, cfg.crop_size)
    x = _crop(image, cfg.crop_size, "center", None)
    return (x.astype(np.float32) / 255.0).astype(np.float32)
