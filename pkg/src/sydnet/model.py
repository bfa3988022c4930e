"""Backbone + patch proposals + head, assembled from a run configuration."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .attention import AttentionBaselineHead, GapHead, GeometryMismatch, HeadConfig, HeadOutput, PbAHead
from .backbone import ReferenceCNN
from .config import RunConfig
from .layers import Module
from .patches import PatchSet, build_patch_set, extract_patch_features
from .tensor import Tensor

_HEADS = {"none": PbAHead, "gap": GapHead, "erase_gap": GapHead, "attention": AttentionBaselineHead}


class SYDNet(Module):
    """End-to-end classifier.

    ``backbone`` is ``None`` when the model consumes imported feature maps;
    ``patch_set`` is ``None`` for the baseline heads, which never look at
    patches.
    """

    def __init__(self, head: Module, backbone: Optional[ReferenceCNN] = None, patch_set: Optional[PatchSet] = None):
        super().__init__()
        self.backbone = self.add_child("backbone", backbone) if backbone is not None else None
        self.head = self.add_child("head", head)
        self.patch_set = patch_set

    @property
    def head_config(self) -> HeadConfig:
        return self.head.cfg

    @property
    def geometry(self) -> tuple[int, int, int, int]:
        """``(h, w, c, L)`` the head was built for."""
        c = self.head.cfg
        return (c.h, c.w, c.c, c.n_classes)

    def features(self, x: Tensor, training: bool) -> Tensor:
        if self.backbone is None:
            return x
        return self.backbone(x, training)

    def __call__(self, x, training: bool = False, rng: Optional[np.random.Generator] = None) -> HeadOutput:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        f = self.features(x, training)
        h, w, c, _ = self.geometry
        if tuple(f.shape[1:]) != (h, w, c):
            raise GeometryMismatch(f"model expects feature maps (h,w,c)=({h},{w},{c}), found {tuple(f.shape[1:])}")
        patch_feats = extract_patch_features(f, self.patch_set) if self.patch_set is not None else None
        return self.head(f, patch_feats, training, rng)

    @property
    def dtype(self):
        return self.head.head.dense.weight.dtype


def build_model(cfg: RunConfig, n_classes: int, feature_geometry: Optional[tuple[int, int, int]] = None,
                rng: Optional[np.random.Generator] = None) -> SYDNet:
    """Construct a model for ``n_classes``.

    With the reference backbone the feature geometry follows from the crop
    size; with imported features it must be passed in (read from the data).
    """
    dtype = np.float64 if cfg.train.precision == "float64" else np.float32
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 0xB0]))
    backbone = None
    if cfg.train.mode == "scratch" and cfg.backbone.kind == "reference_cnn":
        backbone = ReferenceCNN(rng, cfg.backbone.width_tuple(), dtype, cfg.attention.bn_momentum, cfg.attention.bn_eps)
        geometry = backbone.output_geometry(cfg.aug.crop_size)
        if feature_geometry is not None and tuple(feature_geometry) != geometry:
            raise GeometryMismatch(f"backbone produces {geometry}, data declares {tuple(feature_geometry)}")
    else:
        if feature_geometry is None:
            raise GeometryMismatch("imported features need their (h, w, c) geometry")
        geometry = tuple(int(v) for v in feature_geometry)
    h, w, c = geometry
    patch_set = None
    n = 1
    if cfg.train.baseline == "none":
        patch_set = build_patch_set(cfg.patches.set, cfg.patches.grid or None)
        n = patch_set.n
    a = cfg.attention
    head_cfg = HeadConfig(
        n_classes=n_classes, c=c, h=h, w=w, n=n, c_a=a.c_a or None, rho=cfg.train.rho, dropout=a.dropout,
        use_ca=a.use_ca, use_sa=a.use_sa, sa_activation=a.sa_activation, include_self=a.include_self,
        bn_momentum=a.bn_momentum, bn_eps=a.bn_eps, baseline_tokens=a.baseline_tokens,
    )
    head = _HEADS[cfg.train.baseline](head_cfg, rng, dtype)
    return SYDNet(head, backbone, patch_set)


def _is_attention(name: str) -> bool:
    return name.startswith("head.ca.") or name.startswith("head.sa.")


def count_parameters(model: Module) -> dict:
    """Exact trainable-parameter counts with a backbone/head/attention breakdown."""
    breakdown: dict[str, int] = {}
    for name, p in model.named_parameters():
        group = ".".join(name.split(".")[:2]) if name.startswith("head.") else name.split(".")[0]
        breakdown[group] = breakdown.get(group, 0) + p.size
    total = sum(breakdown.values())
    backbone = breakdown.get("backbone", 0)
    attention = sum(p.size for name, p in model.named_parameters() if _is_attention(name))
    buffers = sum(b.size for _, b in model.named_buffers())
    return {
        "total": total,
        "backbone": backbone,
        "head": total - backbone,
        "attention": attention,
        "buffers": buffers,
        "by_module": breakdown,
    }


def analytic_head_parameters(n: int, h: int, w: int, c: int, n_classes: int, c_a: Optional[int] = None,
                             use_ca: bool = True, use_sa: bool = True) -> int:
    """Closed-form trainable-parameter count of the patch attention head.

    channel attention: 2·c·c_a + 2·c_a + c + 4
    spatial attention: 2·n·h·w·c + c (dense) + 2·c (batch norm)
    classifier:        2·c (batch norm) + c·L + L
    """
    c_a = c_a or max(c // 8, 16)
    total = 2 * c + c * n_classes + n_classes
    if use_ca:
        total += 2 * c * c_a + 2 * c_a + c + 4
    if use_sa:
        total += 2 * n * h * w * c + c + 2 * c
    return total

