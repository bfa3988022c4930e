"""Parameterised building blocks and the SGD optimizer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds named parameters, buffers and child modules.

    Names are dotted paths (``head.dense.weight``) so the checkpoint writer can
    address every tensor without knowing the model layout.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = {name: (mod, key) for name, mod, key in self._buffer_owners()}
        expected = set(own) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, found {value.shape}")
            p.data = np.array(value, dtype=p.dtype)
        for name, (mod, key) in buffers.items():
            current = mod._buffers[key]
            value = np.asarray(state[name])
            if value.shape != current.shape:
                raise ValueError(f"{name}: expected shape {current.shape}, found {value.shape}")
            mod._buffers[key] = np.array(value, dtype=current.dtype)

    def _buffer_owners(self, prefix: str = ""):
        for key in self._buffers:
            yield prefix + key, self, key
        for cname, child in self._children.items():
            yield from child._buffer_owners(prefix + cname + ".")

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, mod, key in self._buffer_owners():
            mod._buffers[key] = mod._buffers[key].astype(dtype)
        return self


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = self.add_param("weight", glorot_uniform(rng, n_in, n_out, (n_in, n_out), dtype))
        self.bias = self.add_param("bias", np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class BatchNorm(Module):
    """Batch normalisation over the last axis.

    Training normalises by batch moments and updates the running moments as
    ``running = momentum * running + (1 - momentum) * batch``.
    """

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.add_buffer("running_var", np.ones(channels, dtype=dtype))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        axes = tuple(range(x.ndim - 1))
        if training:
            if x.size == 0:
                raise T.DimensionError("batch_norm needs a non-empty batch in training")
            mu = T.mean(x, axis=axes)
            centered = T.sub(x, mu)
            var = T.mean(T.mul(centered, centered), axis=axes)
            m = self.momentum
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            self._buffers["running_mean"] = (m * rm + (1 - m) * mu.data).astype(rm.dtype)
            self._buffers["running_var"] = (m * rv + (1 - m) * var.data).astype(rv.dtype)
            xhat = T.div(centered, T.sqrt(T.add(var, self.eps)))
        else:
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            xhat = T.mul(T.sub(x, rm), (1.0 / np.sqrt(rv + self.eps)).astype(x.dtype))
        return T.add(T.mul(xhat, self.gamma), self.beta)


def batch_norm(x: Tensor, state: BatchNorm, training: bool) -> Tensor:
    return state(x, training)


class OptimizerError(RuntimeError):
    pass


@dataclass
class SgdState:
    learning_rate: float = 0.007
    step_epochs: int = 50
    decay_factor: float = 0.1
    epoch: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.step_epochs < 1:
            raise ValueError("step_epochs must be a positive integer")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must lie in (0, 1)")

    def effective_lr(self, epoch: Optional[int] = None) -> float:
        epoch = self.epoch if epoch is None else epoch
        # Round the decimal representation so 0.007 * 0.1 == 0.0007 exactly.
        return float(f"{self.learning_rate * self.decay_factor ** (epoch // self.step_epochs):.12g}")


def sgd_step(params: dict[str, Tensor], state: SgdState) -> None:
    """In-place ``p -= lr * grad`` for every named parameter."""
    lr = state.effective_lr()
    for name, p in params.items():
        if p.grad is None:
            raise OptimizerError(f"parameter {name!r} has no gradient; call backward() first")
        p.data -= (lr * p.grad).astype(p.dtype)
