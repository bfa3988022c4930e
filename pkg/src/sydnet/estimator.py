"""scikit-learn style wrapper around the patch attention classifier.

``X`` is either a stack of backbone feature maps ``(N, h, w, c)`` (the
default, ``input_kind="features"``) or a stack of RGB images ``(N, H, W, 3)``
in ``[0, 1]`` fed through the reference CNN (``input_kind="images"``).
Array inputs are not augmented; use the CLI or :func:`sydnet.trainer.train`
for on-the-fly augmentation from an image tree.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .config import RunConfig, apply_setting
from .model import SYDNet, build_model, count_parameters
from .trainer import ArraySource, fit_model, predict_proba


def check_feature_maps(X, dtype=np.float32, geometry: Optional[tuple[int, int, int]] = None) -> np.ndarray:
    """Validate a ``(N, h, w, c)`` stack of finite feature maps."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False)
    if X.ndim != 4:
        raise ValueError(f"expected feature maps of shape (N, h, w, c), got array with shape {X.shape}")
    if geometry is not None and tuple(X.shape[1:]) != tuple(geometry):
        raise ValueError(f"feature maps have (h, w, c)={tuple(X.shape[1:])}, estimator was fitted on {tuple(geometry)}")
    return X


def check_images(X, dtype=np.float32, size: Optional[int] = None) -> np.ndarray:
    """Validate a ``(N, H, W, 3)`` stack of square RGB images scaled to ``[0, 1]``."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False)
    if X.ndim != 4 or X.shape[-1] != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square RGB images of shape (N, S, S, 3), got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("images must be scaled to [0, 1]")
    if size is not None and X.shape[1] != size:
        raise ValueError(f"images are {X.shape[1]}x{X.shape[2]}, estimator was fitted on {size}x{size}")
    return X


class SYDNetClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Patch-based attention classifier with the usual ``fit``/``predict`` API.

    ``transform`` returns the descriptor that reaches the classifier layer
    (``F_PbA + GAP(F)`` for the full model).
    """

    def __init__(self, patch_set: str = "P20", baseline: str = "none", input_kind: str = "features",
                 epochs: int = 200, batch_size: int = 8, lr: float = 0.007, lr_step: int = 50,
                 lr_decay: float = 0.1, rho: float = 0.2, c_a: int = 0, use_ca: bool = True,
                 use_sa: bool = True, sa_activation: str = "softmax", dropout: str = "gaussian",
                 bn_momentum: float = 0.99, precision: str = "float32", random_state: int = 0,
                 verbose: bool = False):
        self.patch_set = patch_set
        self.baseline = baseline
        self.input_kind = input_kind
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_step = lr_step
        self.lr_decay = lr_decay
        self.rho = rho
        self.c_a = c_a
        self.use_ca = use_ca
        self.use_sa = use_sa
        self.sa_activation = sa_activation
        self.dropout = dropout
        self.bn_momentum = bn_momentum
        self.precision = precision
        self.random_state = random_state
        self.verbose = verbose

    def _run_config(self, image_size: Optional[int]) -> RunConfig:
        cfg = RunConfig()
        settings = {
            "patches.set": self.patch_set,
            "train.baseline": self.baseline,
            "train.epochs": self.epochs,
            "train.batch_size": self.batch_size,
            "train.lr": self.lr,
            "train.lr_step": self.lr_step,
            "train.lr_decay": self.lr_decay,
            "train.rho": self.rho,
            "train.seed": self.random_state,
            "train.precision": self.precision,
            "attention.c_a": self.c_a,
            "attention.use_ca": self.use_ca,
            "attention.use_sa": self.use_sa,
            "attention.sa_activation": self.sa_activation,
            "attention.dropout": self.dropout,
            "attention.bn_momentum": self.bn_momentum,
        }
        if self.input_kind == "features":
            settings["train.mode"] = "frozen_features"
            settings["backbone.kind"] = "imported"
        elif self.input_kind == "images":
            settings["aug.source_size"] = image_size
            settings["aug.crop_size"] = image_size
        else:
            raise ValueError(f"input_kind must be 'features' or 'images', got {self.input_kind!r}")
        for key, value in settings.items():
            apply_setting(cfg, key, str(value).lower() if isinstance(value, bool) else str(value))
        return cfg.validate()

    def _dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def _check_X(self, X, fitted: bool) -> np.ndarray:
        if self.input_kind == "images":
            return check_images(X, self._dtype(), self.image_size_ if fitted else None)
        return check_feature_maps(X, self._dtype(), self.feature_geometry_ if fitted else None)

    def fit(self, X, y):
        X = self._check_X(X, fitted=False)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError(f"y must be 1-d with {len(X)} labels, got shape {y.shape}")
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        image_size = X.shape[1] if self.input_kind == "images" else None
        cfg = self._run_config(image_size)
        geometry = tuple(X.shape[1:]) if self.input_kind == "features" else None
        self.model_: SYDNet = build_model(cfg, len(self.classes_), geometry)
        source = ArraySource(X, y_idx, len(self.classes_), cfg.train.seed, self._dtype())
        log = print if self.verbose else (lambda msg: None)
        result = fit_model(self.model_, cfg, source, None, None, log)
        self.history_ = result.history
        self.config_ = cfg
        self.feature_geometry_ = tuple(X.shape[1:]) if self.input_kind == "features" else None
        self.image_size_ = image_size
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._check_X(X, fitted=True)
        return predict_proba(self.model_, X, max(self.batch_size, 32))

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        # Stable argsort keeps the lower class index on ties.
        return self.classes_[np.argsort(-proba, axis=1, kind="stable")[:, 0]]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._check_X(X, fitted=True)
        bs = max(self.batch_size, 32)
        out = [self.model_(T.Tensor(X[i : i + bs]), training=False).descriptor.data for i in range(0, len(X), bs)]
        return np.concatenate(out, axis=0)

    def parameter_counts(self) -> dict:
        check_is_fitted(self, "model_")
        return count_parameters(self.model_)
