"""L-infinity FGSM and PGD adversaries.

``loss_fn(x, y)`` maps an input batch Tensor and its labels to a per-sample
loss Tensor of shape ``[batch]``.  Ascent uses the gradient of the summed loss,
which for independent samples equals each sample's own gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

LossFn = Callable[[Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iterations: int = 7
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    delta_linf: float
    loss_clean: float
    loss_adv: float


def _loss_and_grad(loss_fn: LossFn, x: np.ndarray, y) -> tuple[float, np.ndarray]:
    leaf = Tensor(x, requires_grad=True)
    losses = loss_fn(leaf, y)
    if losses.shape != (x.shape[0],):
        raise ShapeError("attack loss_fn", losses.shape, (x.shape[0],), detail="expected one loss per sample")
    T.backward(T.sum(losses))
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    return float(losses.data.mean()), grad


def _loss(loss_fn: LossFn, x: np.ndarray, y) -> float:
    losses = loss_fn(Tensor(x), y)
    if losses.shape != (x.shape[0],):
        raise ShapeError("attack loss_fn", losses.shape, (x.shape[0],), detail="expected one loss per sample")
    return float(losses.data.mean())


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip to the eps box around ``x``, then to ``[0, 1]``.

    Both sets are axis-aligned boxes, so the two clips equal the joint projection.
    """
    out = np.clip(x_adv, x - np.float32(epsilon), x + np.float32(epsilon))
    return np.clip(out, 0, 1).astype(x.dtype, copy=False)


def _result(loss_fn, x, y, x_adv, loss_clean) -> AttackResult:
    delta = float(np.abs(x_adv.astype(np.float64) - x).max()) if x.size else 0.0
    return AttackResult(x_adv, delta, loss_clean, _loss(loss_fn, x_adv, y))


def fgsm(loss_fn: LossFn, x, y, epsilon: float) -> AttackResult:
    x = np.asarray(x, dtype=np.float32)
    loss_clean, g = _loss_and_grad(loss_fn, x, y)
    x_adv = project(x + np.float32(epsilon) * np.sign(g), x, epsilon)
    return _result(loss_fn, x, y, x_adv, loss_clean)


def pgd(loss_fn: LossFn, x, y, cfg: AttackConfig) -> AttackResult:
    """Sign-gradient ascent projected onto the eps box and ``[0, 1]``.

    With ``random_start`` the first iterate is ``x + U(-eps, eps)`` (projected);
    the noise comes from ``default_rng(cfg.seed)``.  ``iterations == 0``
    returns ``x`` unchanged.
    """
    x = np.asarray(x, dtype=np.float32)
    if cfg.iterations == 0:
        loss = _loss(loss_fn, x, y)
        return AttackResult(x.copy(), 0.0, loss, loss)
    eps = np.float32(cfg.epsilon)
    alpha = np.float32(cfg.alpha)
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(np.float32)
        x_cur = project(x + noise, x, cfg.epsilon)
        loss_clean = _loss(loss_fn, x, y)
    else:
        x_cur = x
        loss_clean = None
    for _ in range(cfg.iterations):
        loss, g = _loss_and_grad(loss_fn, x_cur, y)
        if loss_clean is None:
            loss_clean = loss
        x_cur = project(x_cur + alpha * np.sign(g), x, eps)
    return _result(loss_fn, x, y, x_cur, loss_clean)
