"""Feature-map producers: a small reference CNN and the SYDF feature file format.

SYDF layout (little-endian)::

    b"SYDF" | u32 version=1 | u32 record_count | u32 h | u32 w | u32 c
    record_count × ( u32 label | h·w·c × f32 )
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from . import tensor as T
from .layers import BatchNorm, Module, glorot_uniform
from .tensor import Tensor

SYDF_MAGIC = b"SYDF"
SYDF_VERSION = 1
_SYDF_HEADER = struct.Struct("<4sIIIII")


class FeatureFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BackboneShapeError(ValueError):
    pass


@dataclass
class FeatureMap:
    tensor: Tensor
    source: str  # "reference_cnn" | "imported"

    @property
    def geometry(self) -> tuple[int, int, int]:
        return tuple(self.tensor.shape[-3:])


@dataclass
class BackboneSpec:
    kind: str = "reference_cnn"
    input_size: int = 224
    channels: int = 128
    trainable: bool = True


DEFAULT_WIDTHS = (16, 32, 64, 128, 128)


class ReferenceCNN(Module):
    """Five 3×3 stride-2 conv → BN → ReLU blocks; each block halves the spatial size."""

    def __init__(self, rng: np.random.Generator, widths: Sequence[int] = DEFAULT_WIDTHS,
                 dtype=np.float32, bn_momentum: float = 0.99, bn_eps: float = 1e-5):
        super().__init__()
        if len(widths) != 5:
            raise ValueError("reference CNN takes exactly five block widths")
        self.widths = tuple(int(w) for w in widths)
        cin = 3
        self.blocks = []
        for i, cout in enumerate(self.widths):
            fan_in, fan_out = 9 * cin, 9 * cout
            kernel = self.add_param(f"conv{i}", glorot_uniform(rng, fan_in, fan_out, (3, 3, cin, cout), dtype))
            bn = self.add_child(f"bn{i}", BatchNorm(cout, bn_momentum, bn_eps, dtype))
            self.blocks.append((kernel, bn))
            cin = cout

    @property
    def channels(self) -> int:
        return self.widths[-1]

    def output_geometry(self, input_size: int) -> tuple[int, int, int]:
        if input_size % 32:
            raise BackboneShapeError(f"input size {input_size} is not divisible by 32")
        s = input_size // 32
        return (s, s, self.channels)

    def __call__(self, images: Tensor, training: bool) -> Tensor:
        if images.ndim != 4 or images.shape[-1] != 3:
            raise BackboneShapeError(f"expected b×s×s×3 images, got {images.shape}")
        if images.shape[1] % 32 or images.shape[2] % 32:
            raise BackboneShapeError(f"image size {images.shape[1]}x{images.shape[2]} is not divisible by 32")
        x = images
        for kernel, bn in self.blocks:
            x = T.relu(bn(T.conv2d(x, kernel, stride=2, padding=1), training))
        return x


def reference_cnn_forward(model: ReferenceCNN, images: Tensor, training: bool = False) -> FeatureMap:
    return FeatureMap(model(images, training), "reference_cnn")


# -- SYDF -------------------------------------------------------------------


def write_features(path: str | os.PathLike, features: np.ndarray, labels: Sequence[int]) -> None:
    """Write ``features`` (``N×h×w×c``) and integer labels to an SYDF file."""
    features = np.asarray(features)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 4:
        raise ValueError(f"features must be N×h×w×c, got shape {features.shape}")
    if labels.shape != (features.shape[0],):
        raise ValueError(f"{labels.shape[0]} labels for {features.shape[0]} records")
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF):
        raise ValueError("labels must fit in u32")
    n, h, w, c = features.shape
    data = np.ascontiguousarray(features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_SYDF_HEADER.pack(SYDF_MAGIC, SYDF_VERSION, n, h, w, c))
        for i in range(n):
            fh.write(struct.pack("<I", int(labels[i])))
            fh.write(data[i].tobytes())


class FeatureWriter:
    """Streaming SYDF writer; the record count is patched in on close."""

    def __init__(self, path: str | os.PathLike):
        self._fh: BinaryIO = open(path, "wb")
        self._geometry = None
        self._count = 0
        self._fh.write(b"\0" * _SYDF_HEADER.size)

    def write(self, feature: np.ndarray, label: int) -> None:
        feature = np.asarray(feature)
        if feature.ndim != 3:
            raise ValueError(f"feature record must be h×w×c, got {feature.shape}")
        if self._geometry is None:
            self._geometry = feature.shape
        elif feature.shape != self._geometry:
            raise ValueError(f"record shape {feature.shape} differs from {self._geometry}")
        self._fh.write(struct.pack("<I", int(label)))
        self._fh.write(np.ascontiguousarray(feature, dtype="<f4").tobytes())
        self._count += 1

    def close(self) -> None:
        h, w, c = self._geometry or (0, 0, 0)
        self._fh.seek(0)
        self._fh.write(_SYDF_HEADER.pack(SYDF_MAGIC, SYDF_VERSION, self._count, h, w, c))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_header(fh: BinaryIO) -> tuple[int, int, int, int]:
    raw = fh.read(_SYDF_HEADER.size)
    if len(raw) < _SYDF_HEADER.size:
        raise FeatureFormatError("truncated header", len(raw))
    magic, version, count, h, w, c = _SYDF_HEADER.unpack(raw)
    if magic != SYDF_MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}, expected {SYDF_MAGIC!r}", 0)
    if version != SYDF_VERSION:
        raise FeatureFormatError(f"unsupported version {version}", 4)
    if min(h, w, c) == 0:
        raise FeatureFormatError(f"degenerate geometry {h}x{w}x{c}", 12)
    return count, h, w, c


def load_features(path: str | os.PathLike) -> Iterator[tuple[np.ndarray, int]]:
    """Yield ``(feature h×w×c float32, label)`` pairs from an SYDF file.

    The arrays are plain data: nothing downstream can push gradients into them.
    """
    with open(path, "rb") as fh:
        count, h, w, c = read_header(fh)
        rec_floats = h * w * c
        rec_bytes = 4 + 4 * rec_floats
        offset = _SYDF_HEADER.size
        for i in range(count):
            raw = fh.read(rec_bytes)
            if len(raw) < rec_bytes:
                raise FeatureFormatError(
                    f"truncated record {i} of {count}: {len(raw)} of {rec_bytes} bytes", offset
                )
            label = struct.unpack_from("<I", raw)[0]
            feat = np.frombuffer(raw, dtype="<f4", offset=4).reshape(h, w, c).astype(np.float32)
            feat.setflags(write=False)
            yield feat, label
            offset += rec_bytes
        trailing = fh.read(1)
        if trailing:
            raise FeatureFormatError(f"header declares {count} records but more data follows", offset)


def load_feature_arrays(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Read an entire SYDF file into ``(N×h×w×c, N)`` arrays."""
    with open(path, "rb") as fh:
        count, h, w, c = read_header(fh)
    feats, labels = [], []
    for f, y in load_features(path):
        feats.append(f)
        labels.append(y)
    arr = np.stack(feats) if feats else np.zeros((0, h, w, c), np.float32)
    return arr, np.asarray(labels, dtype=np.int64)
