"""Central finite-difference check of every head parameter group."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .attention import HeadConfig, PbAHead
from .model import SYDNet
from .patches import PatchSet, PatchSpec

# group label -> parameter-name prefixes (dotted paths under the model)
GROUPS: dict[str, tuple[str, ...]] = {
    "W_psi": ("head.ca.W_psi", "head.ca.b_psi"),
    "W_psi_prime": ("head.ca.W_psi_prime",),
    "W_theta": ("head.ca.W_theta", "head.ca.b_theta"),
    "W_delta": ("head.ca.W_delta", "head.ca.b_delta"),
    "W_phi": ("head.ca.W_phi", "head.ca.b_phi"),
    "mlp": ("head.sa.*",),
    "head": ("head.head.*",),
}
DEFAULT_TOLERANCE = 1e-3


@dataclass
class GroupError:
    group: str
    max_rel_error: float
    worst_param: str
    worst_index: int
    entries: int


def _matches(name: str, pattern: str) -> bool:
    return name.startswith(pattern[:-1]) if pattern.endswith("*") else name == pattern


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    # Below the floor the comparison is effectively absolute: central
    # differences of an O(1) loss carry ~1e-11 of round-off at eps=1e-5.
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, index: int, eps: float) -> float:
    flat = arr.reshape(-1)
    old = flat[index]
    step = eps * max(1.0, abs(old))
    flat[index] = old + step
    hi = f()
    flat[index] = old - step
    lo = f()
    flat[index] = old
    return (hi - lo) / (2.0 * step)


def tiny_model(seed: int = 0, n_classes: int = 3, c: int = 8, c_a: int = 4, hw: int = 2) -> SYDNet:
    """64-bit head with n=3 patches on a 6-cell grid over a 2×2 map.

    Two opposite quadrants plus the full grid. Concentric patches would be a
    poor choice here: on a bilinearly upsampled 2×2 map every centred window
    has the same mean, so all pooled patch features coincide and the pair
    weights receive no gradient at all.

    Every tensor, biases and batch-norm moments included, is randomised so no
    branch sits at a symmetric point where errors could cancel.
    """
    rng = np.random.default_rng(seed)
    patch_set = PatchSet("Q3", 6, uniform=(PatchSpec(0, 0, 3, 3), PatchSpec(3, 3, 3, 3)),
                         hierarchical=(PatchSpec(0, 0, 6, 6),))
    cfg = HeadConfig(n_classes=n_classes, c=c, h=hw, w=hw, n=patch_set.n, c_a=c_a)
    model = SYDNet(PbAHead(cfg, rng, np.float64), None, patch_set)
    for _, p in model.named_parameters():
        p.data[...] = rng.normal(0.0, 0.5, size=p.data.shape)
    for name, buf in model.named_buffers():
        if name.endswith("running_var"):
            buf[...] = rng.uniform(0.5, 2.0, size=buf.shape)
        else:
            buf[...] = rng.normal(0.0, 0.3, size=buf.shape)
    return model


def check_gradients(model: Optional[SYDNet] = None, seed: int = 0, batch: int = 4, eps: float = 1e-5,
                    include_input: bool = True) -> list[GroupError]:
    """Compare analytic and central-difference gradients of the eval-mode loss."""
    model = model or tiny_model(seed)
    h, w, c, n_classes = model.geometry
    rng = np.random.default_rng([seed, 1])
    x = rng.normal(size=(batch, h, w, c))
    y = rng.integers(0, n_classes, size=batch)
    x_t = T.Tensor(x, requires_grad=True)

    def loss() -> float:
        return T.cross_entropy(model(T.Tensor(x), training=False).y_pred, y).item()

    model.zero_grad()
    T.cross_entropy(model(x_t, training=False).y_pred, y).backward()
    params = dict(model.named_parameters())
    results = []
    for label, prefixes in GROUPS.items():
        names = [n for n in params if any(_matches(n, pfx) for pfx in prefixes)]
        results.append(_group_error(label, [(n, params[n].data, params[n].grad) for n in names], loss, eps))
    if include_input:
        results.append(_group_error("input F", [("F", x, x_t.grad)], loss, eps))
    return results


def _group_error(label: str, items, loss: Callable[[], float], eps: float) -> GroupError:
    worst = GroupError(label, 0.0, "", -1, 0)
    for name, data, grad in items:
        if grad is None:
            raise RuntimeError(f"{name} received no gradient")
        flat_grad = grad.reshape(-1)
        for i in range(data.size):
            err = relative_error(float(flat_grad[i]), numeric_gradient(loss, data, i, eps))
            worst.entries += 1
            if err >= worst.max_rel_error:
                worst.max_rel_error, worst.worst_param, worst.worst_index = err, name, i
    return worst


def format_table(results: list[GroupError], tolerance: float) -> str:
    lines = [f"{'group':<12} {'entries':>7} {'max rel err':>12}  status  worst"]
    for r in results:
        status = "ok" if r.max_rel_error < tolerance else "FAIL"
        lines.append(f"{r.group:<12} {r.entries:>7} {r.max_rel_error:>12.3e}  {status:<6}  {r.worst_param}[{r.worst_index}]")
    return "\n".join(lines)
