"""Patch-based attention head and the baseline classification heads.

Shapes follow the batched convention used throughout the package: patch
features are ``b×n×h×w×c`` and every head returns ``b×L`` class
probabilities. Each image is processed independently with shared weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import BatchNorm, Dense, Module, glorot_uniform
from .tensor import Tensor


class GeometryMismatch(ValueError):
    """Input geometry disagrees with the geometry a head was built for."""


@dataclass
class HeadOutput:
    y_pred: Tensor
    f_pba: Optional[Tensor] = None
    f_ca: Optional[Tensor] = None
    f_sa: Optional[Tensor] = None
    # Intermediate attention weights, kept for inspection and tests.
    delta: Optional[Tensor] = None
    phi: Optional[Tensor] = None
    # Vector handed to the classifier (before dropout and batch norm).
    descriptor: Optional[Tensor] = None


def default_attention_width(c: int) -> int:
    return max(c // 8, 16)


def fuse_pba(f_ca: Tensor, f_sa: Tensor) -> Tensor:
    """Mask the channel descriptor and add it back as a residual."""
    if f_ca.shape != f_sa.shape:
        raise T.DimensionError(f"fuse_pba: {f_ca.shape} vs {f_sa.shape}")
    return T.add(T.mul(f_ca, f_sa), f_ca)


def _dropout(kind: str, x: Tensor, rho: float, training: bool, rng) -> Tensor:
    if kind == "gaussian":
        return T.gaussian_dropout(x, rho, training, rng)
    if kind == "bernoulli":
        return T.bernoulli_dropout(x, rho, training, rng)
    if kind == "none":
        return x
    raise ValueError(f"unknown dropout kind {kind!r}")


class ChannelAttention(Module):
    """Cross-patch attention producing a convex combination of pooled patch features."""

    def __init__(self, c: int, c_a: int, rng: np.random.Generator, dtype=np.float32, include_self: bool = True):
        super().__init__()
        self.c, self.c_a = c, c_a
        self.include_self = include_self
        self.W_psi = self.add_param("W_psi", glorot_uniform(rng, c, c_a, (c, c_a), dtype))
        self.W_psi_prime = self.add_param("W_psi_prime", glorot_uniform(rng, c, c_a, (c, c_a), dtype))
        self.b_psi = self.add_param("b_psi", np.zeros(c_a, dtype=dtype))
        self.W_theta = self.add_param("W_theta", glorot_uniform(rng, c_a, 1, (c_a, 1), dtype))
        self.b_theta = self.add_param("b_theta", np.zeros(1, dtype=dtype))
        self.W_delta = self.add_param("W_delta", glorot_uniform(rng, 1, 1, (1, 1), dtype))
        self.b_delta = self.add_param("b_delta", np.zeros(1, dtype=dtype))
        self.W_phi = self.add_param("W_phi", glorot_uniform(rng, c, 1, (c, 1), dtype))
        self.b_phi = self.add_param("b_phi", np.zeros(1, dtype=dtype))

    def pair_logits(self, patch_feats: Tensor) -> Tensor:
        """Scalar gate for every ordered patch pair, ``b×n×n``, each in (0, 1)."""
        a = T.einsum("bnyxc,ck->bnyxk", patch_feats, self.W_psi)
        bp = T.einsum("bnyxc,ck->bnyxk", patch_feats, self.W_psi_prime)
        psi = T.tanh(T.add(T.add(T.expand_dims(a, 2), T.expand_dims(bp, 1)), self.b_psi))
        theta = T.sigmoid(T.add(T.einsum("bijyxk,ko->bijyxo", psi, self.W_theta), self.b_theta))
        return T.mean(theta, axis=(3, 4, 5))

    def __call__(self, patch_feats: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(f_ca [b×c], delta [b×n×n], phi [b×n])``."""
        if patch_feats.ndim != 5 or patch_feats.shape[-1] != self.c:
            raise GeometryMismatch(f"channel attention expects b×n×h×w×{self.c}, got {patch_feats.shape}")
        n = patch_feats.shape[1]
        theta = self.pair_logits(patch_feats)
        scores = T.add(T.mul(theta, self.W_delta.reshape(())), self.b_delta)
        if not self.include_self and n > 1:
            mask = np.where(np.eye(n, dtype=bool), -np.inf, 0.0).astype(scores.dtype)
            scores = T.add(scores, mask)
        delta = T.softmax(scores, axis=2)
        pooled = T.global_avg_pool(patch_feats, over="spatial")  # b×n×c
        # GAP is linear, so GAP(sum_j delta_ij F_j) == sum_j delta_ij GAP(F_j).
        f_tilde = T.einsum("bij,bjc->bic", delta, pooled)
        phi_logits = T.add(T.einsum("bic,co->bio", f_tilde, self.W_phi), self.b_phi)
        phi = T.softmax(T.reshape(phi_logits, phi_logits.shape[:2]), axis=1)
        f_ca = T.einsum("bi,bic->bc", phi, f_tilde)
        return f_ca, delta, phi


def channel_attention(patch_feats: Tensor, params: ChannelAttention) -> Tensor:
    """Unbatched convenience form: ``n×h×w×c`` → ``1×c``."""
    f_ca, _, _ = params(T.expand_dims(patch_feats, 0))
    return f_ca


def pairwise_attention_logit(f_i: Tensor, f_j: Tensor, params: ChannelAttention) -> Tensor:
    """Gate for a single ordered pair of ``h×w×c`` patch maps (a scalar in (0, 1))."""
    a = T.einsum("yxc,ck->yxk", f_i, params.W_psi)
    b = T.einsum("yxc,ck->yxk", f_j, params.W_psi_prime)
    psi = T.tanh(T.add(T.add(a, b), params.b_psi))
    theta = T.sigmoid(T.add(T.einsum("yxk,ko->yxo", psi, params.W_theta), params.b_theta))
    return T.mean(theta)


class SpatialAttention(Module):
    """Channel-pooled patch maps → dense → softmax → dropout → batch norm."""

    def __init__(
        self,
        n: int,
        h: int,
        w: int,
        c: int,
        rng: np.random.Generator,
        dtype=np.float32,
        activation: str = "softmax",
        rho: float = 0.2,
        dropout: str = "gaussian",
        bn_momentum: float = 0.99,
        bn_eps: float = 1e-5,
    ):
        super().__init__()
        if activation not in ("softmax", "sigmoid"):
            raise ValueError(f"spatial attention activation must be softmax or sigmoid, got {activation!r}")
        self.n, self.h, self.w, self.c = n, h, w, c
        self.activation = activation
        self.rho = rho
        self.dropout = dropout
        self.dense = self.add_child("dense", Dense(2 * n * h * w, c, rng, dtype))
        self.bn = self.add_child("bn", BatchNorm(c, bn_momentum, bn_eps, dtype))

    def pooled_map(self, patch_feats: Tensor) -> Tensor:
        gap = T.global_avg_pool(patch_feats, over="channel")
        gmp = T.global_max_pool(patch_feats, over="channel")
        return T.concat([gap, gmp], axis=-1)  # b×n×h×w×2

    def mask_logits(self, patch_feats: Tensor) -> Tensor:
        return self.dense(T.flatten(self.pooled_map(patch_feats), 1))

    def __call__(self, patch_feats: Tensor, training: bool, rng=None) -> Tensor:
        expected = (self.n, self.h, self.w)
        if patch_feats.ndim != 5 or patch_feats.shape[1:4] != expected:
            raise GeometryMismatch(f"spatial attention expects b×{self.n}×{self.h}×{self.w}×c, got {patch_feats.shape}")
        z = self.mask_logits(patch_feats)
        z = T.softmax(z, axis=-1) if self.activation == "softmax" else T.sigmoid(z)
        z = _dropout(self.dropout, z, self.rho, training, rng)
        return self.bn(z, training)


def spatial_attention(patch_feats: Tensor, params: SpatialAttention, training: bool, rng=None) -> Tensor:
    return params(T.expand_dims(patch_feats, 0), training, rng)


class ClassifierHead(Module):
    """Regularise (dropout + batch norm), project to ``L`` logits, softmax."""

    def __init__(self, c: int, n_classes: int, rng, dtype=np.float32, rho: float = 0.2,
                 dropout: str = "gaussian", bn_momentum: float = 0.99, bn_eps: float = 1e-5):
        super().__init__()
        self.rho = rho
        self.dropout = dropout
        self.bn = self.add_child("bn", BatchNorm(c, bn_momentum, bn_eps, dtype))
        self.dense = self.add_child("dense", Dense(c, n_classes, rng, dtype))

    def __call__(self, f: Tensor, training: bool, rng=None) -> Tensor:
        z = _dropout(self.dropout, f, self.rho, training, rng)
        z = self.bn(z, training)
        return T.softmax(self.dense(z), axis=-1)


@dataclass
class HeadConfig:
    n_classes: int
    c: int
    h: int
    w: int
    n: int = 1
    c_a: Optional[int] = None
    rho: float = 0.2
    dropout: str = "gaussian"
    use_ca: bool = True
    use_sa: bool = True
    sa_activation: str = "softmax"
    include_self: bool = True
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    baseline_tokens: str = "positions"  # positions | whole

    @property
    def attention_width(self) -> int:
        return self.c_a if self.c_a else default_attention_width(self.c)


class PbAHead(Module):
    """Channel attention, spatial attention, residual fusion and classifier.

    With ``use_ca=False`` the channel descriptor is the plain mean of the
    pooled patch features; with ``use_sa=False`` the mask is dropped and the
    fused vector equals the channel descriptor.
    """

    kind = "pba"

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.ca = self.add_child("ca", ChannelAttention(cfg.c, cfg.attention_width, rng, dtype, cfg.include_self)) if cfg.use_ca else None
        self.sa = (
            self.add_child(
                "sa",
                SpatialAttention(cfg.n, cfg.h, cfg.w, cfg.c, rng, dtype, cfg.sa_activation, cfg.rho,
                                 cfg.dropout, cfg.bn_momentum, cfg.bn_eps),
            )
            if cfg.use_sa
            else None
        )
        self.head = self.add_child(
            "head", ClassifierHead(cfg.c, cfg.n_classes, rng, dtype, cfg.rho, cfg.dropout, cfg.bn_momentum, cfg.bn_eps)
        )

    def check_geometry(self, f: Tensor, patch_feats: Tensor) -> None:
        c = self.cfg
        found = (patch_feats.shape[1],) + tuple(f.shape[1:])
        if found != (c.n, c.h, c.w, c.c):
            raise GeometryMismatch(f"head built for (n,h,w,c)=({c.n},{c.h},{c.w},{c.c}), found {found}")

    def __call__(self, f: Tensor, patch_feats: Tensor, training: bool, rng=None) -> HeadOutput:
        self.check_geometry(f, patch_feats)
        delta = phi = None
        if self.ca is not None:
            f_ca, delta, phi = self.ca(patch_feats)
        else:
            f_ca = T.mean(T.global_avg_pool(patch_feats, over="spatial"), axis=1)
        if self.sa is not None:
            f_sa = self.sa(patch_feats, training, rng)
            f_pba = fuse_pba(f_ca, f_sa)
        else:
            f_sa = None
            f_pba = f_ca
        f_final = T.add(f_pba, T.global_avg_pool(f, over="spatial"))
        y = self.head(f_final, training, rng)
        return HeadOutput(y_pred=y, f_pba=f_pba, f_ca=f_ca, f_sa=f_sa, delta=delta, phi=phi, descriptor=f_final)


def classify(f: Tensor, patch_feats: Tensor, params: PbAHead, training: bool, rng=None) -> HeadOutput:
    return params(f, patch_feats, training, rng)


class GapHead(Module):
    """Global average pooling straight into the classifier."""

    kind = "gap"

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.head = self.add_child(
            "head", ClassifierHead(cfg.c, cfg.n_classes, rng, dtype, cfg.rho, cfg.dropout, cfg.bn_momentum, cfg.bn_eps)
        )

    def __call__(self, f: Tensor, patch_feats: Optional[Tensor], training: bool, rng=None) -> HeadOutput:
        if f.shape[-1] != self.cfg.c:
            raise GeometryMismatch(f"head built for c={self.cfg.c}, found {f.shape[-1]}")
        g = T.global_avg_pool(f, over="spatial")
        return HeadOutput(y_pred=self.head(g, training, rng), descriptor=g)


class AttentionBaselineHead(Module):
    """Channel attention over the backbone's own spatial positions.

    Each of the ``h·w`` locations is treated as a ``1×1×c`` patch, so the
    attention re-weights backbone features without any patch proposals. With
    all attention weights at zero the weights are uniform and the descriptor
    equals plain global average pooling.

    ``baseline_tokens="whole"`` instead feeds the entire map as a single
    self-paired element. Both softmaxes then act on one entry, so the output
    is GAP(F) for any weights; it is kept for comparison only.
    """

    kind = "attention"

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.ca = self.add_child("ca", ChannelAttention(cfg.c, cfg.attention_width, rng, dtype, cfg.include_self))
        self.head = self.add_child(
            "head", ClassifierHead(cfg.c, cfg.n_classes, rng, dtype, cfg.rho, cfg.dropout, cfg.bn_momentum, cfg.bn_eps)
        )

    def __call__(self, f: Tensor, patch_feats: Optional[Tensor], training: bool, rng=None) -> HeadOutput:
        if f.shape[-1] != self.cfg.c:
            raise GeometryMismatch(f"head built for c={self.cfg.c}, found {f.shape[-1]}")
        b, h, w, c = f.shape
        if self.cfg.baseline_tokens == "whole":
            tokens = T.expand_dims(f, 1)
        else:
            tokens = T.reshape(f, (b, h * w, 1, 1, c))
        f_ca, delta, phi = self.ca(tokens)
        return HeadOutput(y_pred=self.head(f_ca, training, rng), f_ca=f_ca, delta=delta, phi=phi, descriptor=f_ca)


def attention_baseline_head(f: Tensor, params: AttentionBaselineHead, training: bool, rng=None) -> HeadOutput:
    return params(f, None, training, rng)
