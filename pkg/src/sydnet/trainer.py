"""Training, evaluation and ablation sweeps."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import GeometryMismatch
from .augment import AugmentConfig, augment_eval, augment_train
from .backbone import load_feature_arrays
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import DatasetManifest, ImageCache, batch_iterator, epoch_order
from .layers import SgdState, sgd_step
from .metrics import Accumulator, MetricsRow, write_confusion_csv, write_metrics_csv
from .model import SYDNet, build_model

logger = logging.getLogger(__name__)


class NumericAbort(RuntimeError):
    """Loss or gradients became non-finite."""


# -- data sources -------------------------------------------------------------


class ImageSource:
    """Decoded images from a manifest split, augmented on the fly.

    Each sample draws from its own stream seeded by (seed, epoch, index), so
    augmentation does not depend on batch composition or worker count.
    """

    def __init__(self, manifest: DatasetManifest, split: str, aug: AugmentConfig, seed: int, dtype=np.float32):
        self.manifest = manifest
        self.split = split
        self.aug = aug
        self.seed = seed
        self.dtype = dtype
        self.cache = ImageCache(manifest, aug.source_size)
        self.n_classes = manifest.n_classes

    def __len__(self) -> int:
        return len(self.manifest.split(self.split))

    def batches(self, epoch: int, batch_size: int, training: bool) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        shuffle = self.seed if training else None
        for images, labels, idx in batch_iterator(self.manifest, self.split, batch_size, shuffle, epoch,
                                                  self.aug.source_size, self.cache):
            if training:
                out = []
                for img, k in zip(images, idx):
                    rng = np.random.default_rng([self.seed, 0xA0, epoch, k])
                    out.append(augment_train(img, self.aug, rng)[0])
            else:
                out = [augment_eval(img, self.aug) for img in images]
            yield np.stack(out).astype(self.dtype), labels


class ArraySource:
    """In-memory features or preprocessed images with integer labels."""

    def __init__(self, x: np.ndarray, y: np.ndarray, n_classes: int, seed: int = 0, dtype=np.float32):
        self.x = np.asarray(x, dtype=dtype)
        self.y = np.asarray(y, dtype=np.int64)
        self.n_classes = n_classes
        self.seed = seed

    def __len__(self) -> int:
        return len(self.y)

    def batches(self, epoch: int, batch_size: int, training: bool) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = epoch_order(len(self.y), self.seed if training else None, epoch)
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield self.x[idx], self.y[idx]


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: SYDNet
    history: list[MetricsRow]
    best_top1: float
    best_epoch: int
    confusion: np.ndarray
    run_dir: Optional[Path] = None

    @property
    def final_test(self) -> Optional[MetricsRow]:
        rows = [r for r in self.history if r.split == "test"]
        return rows[-1] if rows else None


def _grad_norms(model: SYDNet) -> dict[str, float]:
    return {
        name: float(np.sqrt(np.sum(p.grad.astype(np.float64) ** 2))) if p.grad is not None else float("nan")
        for name, p in model.named_parameters()
    }


def train_step(model: SYDNet, x: np.ndarray, y: np.ndarray, state: SgdState, rng: np.random.Generator):
    """One SGD step; returns ``(loss, probabilities)`` before the update."""
    model.zero_grad()
    out = model(T.Tensor(x), training=True, rng=rng)
    loss = T.cross_entropy(out.y_pred, y)
    if not np.isfinite(loss.data).all():
        raise NumericAbort(f"non-finite loss {loss.item()} at epoch {state.epoch}")
    loss.backward()
    params = dict(model.named_parameters())
    for name, p in params.items():
        if p.grad is None:
            # Parameters outside this graph (e.g. masked branches) stay put.
            p.grad = np.zeros_like(p.data)
        elif not np.isfinite(p.grad).all():
            norms = _grad_norms(model)
            dump = "\n".join(f"  {k}: {v:.6g}" for k, v in norms.items())
            raise NumericAbort(f"non-finite gradient in {name} at epoch {state.epoch}; gradient norms:\n{dump}")
    sgd_step(params, state)
    return loss.item(), out.y_pred.data


def evaluate(model: SYDNet, source, batch_size: int = 32, epoch: int = 0, split: str = "test",
             lr: float = 0.0) -> tuple[MetricsRow, np.ndarray]:
    """Eval-mode pass: no dropout, batch norm on running moments."""
    h, w, c, n_classes = model.geometry
    if source.n_classes != n_classes:
        raise GeometryMismatch(f"model has L={n_classes} classes, data has L={source.n_classes}")
    acc = Accumulator(n_classes)
    for x, y in source.batches(epoch, batch_size, training=False):
        out = model(T.Tensor(x), training=False)
        loss = T.cross_entropy(out.y_pred, y)
        acc.update(out.y_pred.data, y, loss.item())
    return acc.row(epoch, split, lr), acc.confusion


def predict_proba(model: SYDNet, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    chunks = [model(T.Tensor(x[i : i + batch_size]), training=False).y_pred.data for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks, axis=0)


def fit_model(model: SYDNet, cfg: RunConfig, train_source, test_source=None, run_dir: Optional[Path] = None,
              log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """SGD with the step schedule; evaluates on ``test_source`` after each epoch."""
    t = cfg.train
    state = SgdState(learning_rate=t.lr, step_epochs=t.lr_step, decay_factor=t.lr_decay)
    history: list[MetricsRow] = []
    best_top1, best_epoch = -1.0, -1
    confusion = np.zeros((model.geometry[3],) * 2, dtype=np.int64)
    ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = Path(run_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    config_hash = cfg.config_hash()
    emit = log or (lambda msg: logger.info(msg))

    for epoch in range(t.epochs):
        state.epoch = epoch
        lr = state.effective_lr()
        acc = Accumulator(model.geometry[3])
        rng = np.random.default_rng([t.seed, 0xD0, epoch])
        for x, y in train_source.batches(epoch, t.batch_size, training=True):
            loss, probs = train_step(model, x, y, state, rng)
            acc.update(probs, y, loss)
        history.append(acc.row(epoch, "train", lr))
        msg = f"epoch {epoch} train loss={history[-1].loss:.4f} top1={history[-1].top1:.2f}"
        if test_source is not None:
            row, cm = evaluate(model, test_source, max(t.batch_size, 32), epoch, "test", lr)
            history.append(row)
            confusion = cm
            msg += f" | test loss={row.loss:.4f} top1={row.top1:.2f} top5={row.top5:.2f}"
            if row.top1 > best_top1:
                best_top1, best_epoch = row.top1, epoch
                if ckpt_dir is not None:
                    save_checkpoint(ckpt_dir / "best.sydw", model.state_dict(), epoch, config_hash)
        emit(msg)
        if run_dir is not None:
            write_metrics_csv(Path(run_dir) / "metrics.csv", history)
            if (epoch + 1) % t.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"epoch_{epoch + 1:04d}.sydw", model.state_dict(), epoch, config_hash)

    if run_dir is not None:
        save_checkpoint(ckpt_dir / "final.sydw", model.state_dict(), t.epochs - 1, config_hash)
        write_confusion_csv(Path(run_dir) / "confusion.csv", confusion)
    return TrainResult(model, history, best_top1, best_epoch, confusion, Path(run_dir) if run_dir else None)


def effective_aug(cfg: RunConfig) -> AugmentConfig:
    """Augmentation actually used: the plain baseline trains without erasing."""
    aug = dataclasses.replace(cfg.aug)
    if cfg.train.baseline == "gap":
        aug.erase_regions = 0
    return aug


def _dtype(cfg: RunConfig):
    return np.float64 if cfg.train.precision == "float64" else np.float32


def make_sources(cfg: RunConfig, manifest: Optional[DatasetManifest] = None):
    """Train/test sources for the configured mode; returns ``(train, test, geometry)``."""
    dtype = _dtype(cfg)
    if cfg.train.mode == "frozen_features" or cfg.backbone.kind == "imported":
        if not cfg.data.features_train:
            raise FileNotFoundError("data.features_train is required for imported features")
        x_tr, y_tr = load_feature_arrays(cfg.data.features_train)
        n_classes = int(y_tr.max()) + 1
        test = None
        if cfg.data.features_test:
            x_te, y_te = load_feature_arrays(cfg.data.features_test)
            if x_te.shape[1:] != x_tr.shape[1:]:
                raise GeometryMismatch(f"train features {x_tr.shape[1:]} vs test features {x_te.shape[1:]}")
            n_classes = max(n_classes, int(y_te.max()) + 1)
            test = ArraySource(x_te, y_te, n_classes, cfg.train.seed, dtype)
        if cfg.data.expect_classes:
            n_classes = cfg.data.expect_classes
            if test is not None:
                test.n_classes = n_classes
        train = ArraySource(x_tr, y_tr, n_classes, cfg.train.seed, dtype)
        return train, test, tuple(x_tr.shape[1:])
    if manifest is None:
        raise ValueError("image mode needs a dataset manifest")
    aug = effective_aug(cfg)
    train = ImageSource(manifest, "train", aug, cfg.train.seed, dtype)
    test = ImageSource(manifest, "test", aug, cfg.train.seed, dtype) if manifest.split("test") else None
    return train, test, None


def train(cfg: RunConfig, manifest: Optional[DatasetManifest] = None, run_dir: Optional[str | os.PathLike] = None,
          log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Build a model from ``cfg`` and train it on ``manifest`` (or SYDF features)."""
    train_src, test_src, geometry = make_sources(cfg, manifest)
    model = build_model(cfg, train_src.n_classes, geometry)
    return fit_model(model, cfg, train_src, test_src, Path(run_dir) if run_dir else None, log)


def load_model(checkpoint_path: str | os.PathLike, cfg: RunConfig, n_classes: int,
               geometry: Optional[tuple[int, int, int]] = None, check_hash: bool = True) -> SYDNet:
    ckpt = load_checkpoint(checkpoint_path)
    if check_hash and ckpt.config_hash != cfg.config_hash():
        raise ValueError(f"{checkpoint_path}: config hash {ckpt.config_hash:#x} does not match {cfg.config_hash():#x}")
    head_w = ckpt.tensors.get("head.head.dense.weight")
    if head_w is not None and head_w.shape[1] != n_classes:
        raise GeometryMismatch(f"checkpoint has L={head_w.shape[1]} classes, data has L={n_classes}")
    model = build_model(cfg, n_classes, geometry)
    try:
        model.load_state_dict(ckpt.tensors)
    except (KeyError, ValueError) as exc:
        h, w, c, L = model.geometry
        raise GeometryMismatch(f"checkpoint incompatible with expected (h,w,c,L)=({h},{w},{c},{L}): {exc}") from None
    return model


# -- ablation -----------------------------------------------------------------

# variant -> (config overrides, row label template)
ABLATION_VARIANTS: dict[str, tuple[dict[str, str], str]] = {
    "patches_only": ({"attention.use_ca": "false", "attention.use_sa": "false"}, "Using P_{n} only, no attention"),
    "sa_only": ({"attention.use_ca": "false"}, "Spatial attention only: SA_{n}"),
    "ca_only": ({"attention.use_sa": "false"}, "Channel attention only: CA_{n}"),
    "sigmoid_sa": ({"attention.sa_activation": "sigmoid"}, "sigmoid spatial attention: SA_{n}"),
    "general_dropout": ({"attention.dropout": "bernoulli"}, "P_{n} with general dropout"),
    "no_gaussian_dropout": ({"attention.dropout": "none"}, "P_{n} without Gaussian dropout"),
    "erase1_random": ({"aug.erase_regions": "1", "aug.erase_fill": "random_rgb"}, "P_{n} with 1 erased region, rand RGB"),
    "erase1_fixed": ({"aug.erase_regions": "1", "aug.erase_fill": "fixed_127"}, "P_{n} with 1 erased region, RGB=127"),
    "erase2_fixed": ({"aug.erase_regions": "2", "aug.erase_fill": "fixed_127"}, "P_{n} with 2 erased regions, RGB=127"),
    "full": ({"aug.erase_regions": "2", "aug.erase_fill": "random_rgb"}, "P_{n}, 2 erased regions, rand RGB: full model"),
}

ABLATION_HEADER = ("variant", "label", "patch_set", "status", "epoch", "split", "loss", "top1", "top5", "lr", "best_top1")


def _run_variant(args) -> list[str]:
    from .config import apply_setting

    base_cfg, manifest, variant, patch_set = args
    cfg = base_cfg.copy()
    overrides, label = ABLATION_VARIANTS[variant]
    n = patch_set.lstrip("P")
    apply_setting(cfg, "patches.set", patch_set)
    apply_setting(cfg, "train.baseline", "none")
    for k, v in overrides.items():
        apply_setting(cfg, k, v)
    label = label.replace("{n}", n)
    try:
        cfg.validate()
        result = train(cfg, manifest)
        row = result.final_test or result.history[-1]
        return [variant, label, patch_set, "ok", *row.as_csv(), f"{result.best_top1:.4f}"]
    except Exception as exc:
        logger.warning("ablation variant %s/%s failed: %s", variant, patch_set, exc)
        return [variant, label, patch_set, f"failed: {type(exc).__name__}: {exc}", "", "", "", "", "", "", ""]


def run_ablation(cfg: RunConfig, manifest: Optional[DatasetManifest], patch_sets: Sequence[str],
                 variants: Sequence[str], out_csv: Optional[str | os.PathLike] = None, jobs: int = 1) -> list[list[str]]:
    """Train every (variant, patch set) pair with the shared seed; one CSV row each."""
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ValueError(f"unknown ablation variant {v!r}; choose from {sorted(ABLATION_VARIANTS)}")
    tasks = [(cfg, manifest, v, p) for p in patch_sets for v in variants]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_variant, tasks))
    else:
        rows = [_run_variant(t) for t in tasks]
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ABLATION_HEADER)
            w.writerows(rows)
    return rows
