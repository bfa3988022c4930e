"""Dataset trees, manifests, the synthetic shape generator and batch iteration.

Layout on disk (both for ingestion and generation)::

    root/train/<class>/<image>.png
    root/test/<class>/<image>.png

A single tree ``root/<class>/*`` plus a split file (lines ``<relpath> <split>``)
is also accepted.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image, ImageDraw

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}

# Class counts of the four posture datasets, for validating user-supplied trees.
KNOWN_CLASS_COUNTS = {"sports102": 102, "yoga82": 82, "yoga107": 107, "dance12": 12}


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class Entry:
    path: str  # relative to the manifest root, '/'-separated
    label: int
    split: str


@dataclass
class DatasetManifest:
    root: Path
    classes: list[str]
    entries: list[Entry]
    skipped: list[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def to_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps({"path": e.path, "class": self.classes[e.label], "split": e.split}) + "\n")

    def check_class_count(self, expected: int) -> None:
        if self.n_classes != expected:
            raise DataError(f"expected {expected} classes, found {self.n_classes} under {self.root}")


def _list_images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _is_readable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def scan_dataset(root: str | os.PathLike, split_file: Optional[str | os.PathLike] = None,
                 verify: bool = True) -> DatasetManifest:
    """Build a deterministic manifest for a directory-per-class image tree."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    found: list[tuple[str, str, str]] = []  # (relpath, class name, split)
    if split_file is None:
        for split in ("train", "test"):
            split_dir = root / split
            if not split_dir.is_dir():
                continue
            for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                images = _list_images(class_dir)
                if not images:
                    logger.warning("empty class directory %s", class_dir)
                for img in images:
                    found.append((img.relative_to(root).as_posix(), class_dir.name, split))
    else:
        splits = {}
        with open(split_file, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    rel, split = line.rsplit(maxsplit=1)
                    if split not in ("train", "test"):
                        raise DataError(f"split file: unknown split {split!r} for {rel}")
                    splits[rel] = split
        for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            for img in _list_images(class_dir):
                rel = img.relative_to(root).as_posix()
                if rel in splits:
                    found.append((rel, class_dir.name, splits[rel]))

    classes = sorted({name for _, name, _ in found})
    if not classes:
        raise DataError(f"no classes found under {root}")
    index = {name: i for i, name in enumerate(classes)}
    entries, skipped = [], []
    for rel, name, split in sorted(found):
        if verify and not _is_readable(root / rel):
            skipped.append(rel)
            continue
        entries.append(Entry(rel, index[name], split))
    if skipped:
        logger.warning("skipped %d unreadable images", len(skipped))
    return DatasetManifest(root=root, classes=classes, entries=entries, skipped=skipped)


def load_image(path: str | os.PathLike, size: int) -> np.ndarray:
    """Decode to 8-bit RGB and resize (not crop) to ``size×size``."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


# -- synthetic shapes -------------------------------------------------------

SHAPES = ("disk", "square", "triangle", "cross", "ring", "bar", "diamond", "star")


@dataclass
class SynthSpec:
    num_classes: int = 4
    samples_per_class: int = 100
    image_size: int = 64
    seed: int = 0
    test_fraction: float = 0.2
    noise: float = 25.0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must lie in [2, {len(SHAPES)}]")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")


def _shape_polygon(kind: str, cx: float, cy: float, r: float, angle: float) -> list[tuple[float, float]]:
    def rot(points):
        c, s = math.cos(angle), math.sin(angle)
        return [(cx + x * c - y * s, cy + x * s + y * c) for x, y in points]

    if kind == "square":
        return rot([(-r, -r), (r, -r), (r, r), (-r, r)])
    if kind == "diamond":
        return rot([(0, -r), (0.6 * r, 0), (0, r), (-0.6 * r, 0)])
    if kind == "triangle":
        return rot([(r * math.cos(t), r * math.sin(t)) for t in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)])
    if kind == "cross":
        a = r / 3
        return rot([(-a, -r), (a, -r), (a, -a), (r, -a), (r, a), (a, a), (a, r), (-a, r),
                    (-a, a), (-r, a), (-r, -a), (-a, -a)])
    if kind == "bar":
        return rot([(-r, -r / 3), (r, -r / 3), (r, r / 3), (-r, r / 3)])
    if kind == "star":
        pts = []
        for k in range(10):
            rad = r if k % 2 == 0 else 0.45 * r
            t = -math.pi / 2 + k * math.pi / 5
            pts.append((rad * math.cos(t), rad * math.sin(t)))
        return rot(pts)
    raise ValueError(kind)


def render_shape(kind: str, size: int, rng: np.random.Generator, noise: float = 25.0) -> np.ndarray:
    """One ``size×size×3`` uint8 image of ``kind``: a bright shape on a dark noisy background."""
    bg = rng.uniform(20, 90) + rng.uniform(-15, 15, size=3)
    base = np.clip(bg + rng.normal(0, noise, size=(size, size, 3)), 0, 255).astype(np.uint8)
    im = Image.fromarray(base)
    draw = ImageDraw.Draw(im)
    fg = rng.uniform(170, 250) + rng.uniform(-20, 20, size=3)
    color = tuple(int(v) for v in np.clip(fg, 0, 255))
    r = rng.uniform(0.2, 0.35) * size
    cx = rng.uniform(r, size - r)
    cy = rng.uniform(r, size - r)
    angle = rng.uniform(0, 2 * math.pi)
    if kind == "disk":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
    elif kind == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=color, width=max(2, int(r / 3)))
    else:
        draw.polygon(_shape_polygon(kind, cx, cy, r, angle), fill=color)
    return np.asarray(im)


def generate_synthetic(spec: SynthSpec, out: str | os.PathLike) -> Path:
    """Render a class-balanced shape dataset in the ingestion layout."""
    out = Path(out)
    # samples_per_class counts training images; the test share is of the total.
    n_train = spec.samples_per_class
    n_test = int(round(n_train * spec.test_fraction / (1.0 - spec.test_fraction)))
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.num_classes)
    for label, kind in enumerate(SHAPES[: spec.num_classes]):
        rng = np.random.default_rng(seeds[label])
        class_name = f"{label:02d}_{kind}"
        for i in range(n_train + n_test):
            split = "train" if i < n_train else "test"
            folder = out / split / class_name
            try:
                folder.mkdir(parents=True, exist_ok=True)
                img = render_shape(kind, spec.image_size, rng, spec.noise)
                # No timestamps or text chunks, so reruns are byte-identical.
                Image.fromarray(img).save(folder / f"{i:05d}.png", optimize=False)
            except OSError as exc:
                raise DataError(f"cannot write {folder}: {exc}") from exc
    return out


# -- batching ---------------------------------------------------------------


class ImageCache:
    """Decoded images keyed by manifest path; decode failures are remembered."""

    def __init__(self, manifest: DatasetManifest, size: int):
        self.manifest = manifest
        self.size = size
        self._cache: dict[str, Optional[np.ndarray]] = {}
        self.failures = 0

    def get(self, entry: Entry) -> Optional[np.ndarray]:
        if entry.path not in self._cache:
            try:
                self._cache[entry.path] = load_image(self.manifest.root / entry.path, self.size)
            except Exception as exc:
                logger.warning("cannot decode %s: %s", entry.path, exc)
                self._cache[entry.path] = None
                self.failures += 1
        return self._cache[entry.path]


def epoch_order(n: int, shuffle_seed: Optional[int], epoch: int = 0) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    rng = np.random.default_rng([shuffle_seed, epoch])
    return rng.permutation(n)


def batch_iterator(manifest: DatasetManifest, split: str, batch_size: int, shuffle_seed: Optional[int] = None,
                   epoch: int = 0, source_size: int = 256, cache: Optional[ImageCache] = None,
                   ) -> Iterator[tuple[list[np.ndarray], np.ndarray, list[int]]]:
    """Yield ``(images, labels, indices)`` batches of decoded uint8 images.

    ``indices`` are positions within the split, usable to derive per-sample
    random streams. Images that fail to decode are dropped from their batch.
    """
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    cache = cache or ImageCache(manifest, source_size)
    order = epoch_order(len(entries), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        images, labels, idx = [], [], []
        for k in order[start : start + batch_size]:
            img = cache.get(entries[k])
            if img is None:
                continue
            images.append(img)
            labels.append(entries[k].label)
            idx.append(int(k))
        if images:
            yield images, np.asarray(labels, dtype=np.int64), idx
