"""Hybrid patch proposals over an upsampled feature map.

A patch set combines a uniform, non-overlapping grid of ``a×a`` squares with a
stack of concentric, centred squares that grow in equal steps up to the full
grid. Patch features are produced by bilinearly upsampling the backbone map to
the grid and bilinearly resizing each patch crop back to the backbone's
``h×w``.

All resampling is separable, so each step is a pair of small interpolation
matrices applied along rows and columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    x: int
    y: int
    dw: int
    dh: int

    def validate(self, grid: int) -> None:
        if self.dw < 1 or self.dh < 1:
            raise GeometryError(f"patch {self} has non-positive size")
        if self.x < 0 or self.y < 0 or self.x + self.dw > grid or self.y + self.dh > grid:
            raise GeometryError(f"patch {self} exceeds the {grid}x{grid} grid")


@dataclass(frozen=True)
class PatchSet:
    name: str
    grid_size: int
    uniform: tuple[PatchSpec, ...] = field(default_factory=tuple)
    hierarchical: tuple[PatchSpec, ...] = field(default_factory=tuple)

    @property
    def n(self) -> int:
        return len(self.uniform) + len(self.hierarchical)

    @property
    def patches(self) -> tuple[PatchSpec, ...]:
        return self.uniform + self.hierarchical

    def describe(self) -> str:
        lines = [
            f"{self.name}: n={self.n} grid={self.grid_size}x{self.grid_size} "
            f"({len(self.uniform)} uniform + {len(self.hierarchical)} hierarchical)",
            f"{'idx':>4} {'kind':<12} {'x':>3} {'y':>3} {'dw':>3} {'dh':>3}",
        ]
        for i, p in enumerate(self.patches):
            kind = "uniform" if i < len(self.uniform) else "hierarchical"
            lines.append(f"{i:>4} {kind:<12} {p.x:>3} {p.y:>3} {p.dw:>3} {p.dh:>3}")
        return "\n".join(lines)


def uniform_grid(grid: int, a: int) -> list[PatchSpec]:
    """Non-overlapping ``a×a`` squares tiling the grid, row-major."""
    if a < 1 or grid < 1 or grid % a:
        raise GeometryError(f"patch side {a} does not divide grid {grid}")
    k = grid // a
    return [PatchSpec(x=col * a, y=row * a, dw=a, dh=a) for row in range(k) for col in range(k)]


def hierarchical_patches(grid: int, count: int) -> list[PatchSpec]:
    """``count`` centred squares with sides ``grid·t/count``, smallest first."""
    if count < 1 or grid % count:
        raise GeometryError(f"hierarchical count {count} does not divide grid {grid}")
    step = grid // count
    out = []
    for t in range(1, count + 1):
        side = step * t
        # Equal margins need (grid - side) even; otherwise the extra cell goes right/bottom.
        off = (grid - side) // 2
        out.append(PatchSpec(x=off, y=off, dw=side, dh=side))
    return out


# name -> (grid, uniform side, hierarchical count)
PATCH_SETS = {
    "P9": (48, 16, 0),
    "P12": (48, 16, 3),
    "P16": (48, 12, 0),
    "P20": (48, 12, 4),
    "P25": (45, 9, 0),
    "P30": (45, 9, 5),
}


def build_patch_set(name: str, grid: int | None = None) -> PatchSet:
    """Named patch set, optionally on a non-default grid size."""
    try:
        default_grid, a_default, count = PATCH_SETS[name]
    except KeyError:
        raise GeometryError(f"unknown patch set {name!r}; choose from {sorted(PATCH_SETS)}") from None
    if grid is None:
        grid, a = default_grid, a_default
    else:
        per_side = default_grid // a_default
        if grid % per_side:
            raise GeometryError(
                f"{name} needs a grid divisible by {per_side} ({per_side}x{per_side} uniform patches); got {grid}"
            )
        a = grid // per_side
    return custom_patch_set(name, grid, uniform_side=a, hierarchical=count)


def custom_patch_set(name: str, grid: int, uniform_side: int | None = None, hierarchical: int = 0) -> PatchSet:
    uniform = uniform_grid(grid, uniform_side) if uniform_side else []
    hier = hierarchical_patches(grid, hierarchical) if hierarchical else []
    if not uniform and not hier:
        raise GeometryError("a patch set needs at least one patch")
    return PatchSet(name=name, grid_size=grid, uniform=tuple(uniform), hierarchical=tuple(hier))


# -- bilinear resampling --------------------------------------------------


@lru_cache(maxsize=512)
def _interp_matrix(n_out: int, n_in: int, start: float = 0.0, length: float | None = None) -> np.ndarray:
    """Row-stochastic matrix mapping ``n_in`` samples to ``n_out`` samples.

    Half-pixel convention: output cell ``o`` samples the source coordinate
    ``start + (o + 0.5)·length/n_out - 0.5`` and clamps to the valid range.
    ``start``/``length`` select a sub-window of the source (in source cells).
    """
    if length is None:
        length = float(n_in)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = length / n_out
    for o in range(n_out):
        src = start + (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    m.setflags(write=False)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of ``...×h×w×c`` to ``...×out_h×out_w×c``."""
    h, w = x.shape[-3], x.shape[-2]
    wy = _interp_matrix(out_h, h).astype(x.dtype)
    wx = _interp_matrix(out_w, w).astype(x.dtype)
    return _separable(x, wy, wx)


def _separable(x: Tensor, wy: np.ndarray, wx: np.ndarray) -> Tensor:
    if x.ndim == 3:
        return T.einsum("gy,yxc,hx->ghc", wy, x, wx)
    if x.ndim == 4:
        return T.einsum("gy,byxc,hx->bghc", wy, x, wx)
    raise T.DimensionError(f"expected a 3-d or 4-d feature map, got shape {x.shape}")


def upsample_feature_map(f: Tensor, grid: int) -> Tensor:
    """Bilinear upsampling of ``[b×]h×w×c`` to ``[b×]grid×grid×c``."""
    h, w = f.shape[-3], f.shape[-2]
    if grid < h or grid < w:
        raise GeometryError(f"grid {grid} is smaller than the feature map {h}x{w}")
    return resize_bilinear(f, grid, grid)


def pool_patch(up: Tensor, p: PatchSpec, out_h: int, out_w: int) -> Tensor:
    """Crop ``p`` from the upsampled map and resize it to ``out_h×out_w``."""
    grid = up.shape[-3]
    if up.shape[-2] != grid:
        raise GeometryError(f"upsampled map must be square, got {up.shape}")
    p.validate(grid)
    wy = _interp_matrix(out_h, grid, float(p.y), float(p.dh))
    wx = _interp_matrix(out_w, grid, float(p.x), float(p.dw))
    return _separable(up, wy.astype(up.dtype), wx.astype(up.dtype))


@lru_cache(maxsize=64)
def _composite_matrices(ps: PatchSet, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    # Upsample then crop-resize, folded into one (n, out, in) matrix per axis.
    up_y = _interp_matrix(ps.grid_size, h)
    up_x = _interp_matrix(ps.grid_size, w)
    my = np.stack([_interp_matrix(h, ps.grid_size, float(p.y), float(p.dh)) @ up_y for p in ps.patches])
    mx = np.stack([_interp_matrix(w, ps.grid_size, float(p.x), float(p.dw)) @ up_x for p in ps.patches])
    return my, mx


def extract_patch_features(f: Tensor, ps: PatchSet) -> Tensor:
    """Stacked pooled patch features.

    ``f`` is ``h×w×c`` (result ``n×h×w×c``) or batched ``b×h×w×c`` (result
    ``b×n×h×w×c``). Order is uniform (row-major) then hierarchical (small to
    large). Because upsampling and pooling are both linear, the two steps are
    applied as one precomputed separable map per patch.
    """
    if f.ndim not in (3, 4):
        raise T.DimensionError(f"expected a 3-d or 4-d feature map, got shape {f.shape}")
    h, w = f.shape[-3], f.shape[-2]
    if ps.grid_size < max(h, w):
        raise GeometryError(f"grid {ps.grid_size} is smaller than the feature map {h}x{w}")
    my, mx = _composite_matrices(ps, h, w)
    my, mx = my.astype(f.dtype), mx.astype(f.dtype)
    if f.ndim == 3:
        return T.einsum("ngy,yxc,nhx->nghc", my, f, mx)
    return T.einsum("ngy,byxc,nhx->bnghc", my, f, mx)
