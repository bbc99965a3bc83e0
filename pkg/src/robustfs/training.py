"""Phase one: mini-batch adversarial training of the extractor and base head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, TextIO

import numpy as np

from . import tensor as T
from .attack import AttackConfig, pgd
from .data_io import LabeledSet
from .errors import DataError, LabelError, NumericError, UsageError
from .network import Network


@dataclass
class SgdState:
    """Per-parameter velocity buffers.

    Update rule: ``v <- momentum * v + (1 - dampening) * (g + wd * p)`` then
    ``p <- p - lr * v``.  Buffers start at zero, so dampening also scales the
    first step.
    """

    momentum: float = 0.9
    dampening: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, Optional[np.ndarray]],
    state: SgdState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """In-place SGD update of every array in ``params``."""
    m = np.float32(state.momentum)
    keep = np.float32(1.0 - state.dampening)
    lr32, wd = np.float32(lr), np.float32(weight_decay)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise UsageError(f"sgd_step: no gradient for parameter {name!r}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        step = g + wd * p if weight_decay else g
        v *= m
        v += keep * step
        p -= lr32 * v


def cosine_lr(base_lr: float, final_ratio: float, epoch: int, epochs: int) -> float:
    """Cosine decay from ``base_lr`` at epoch 0 to ``base_lr * final_ratio`` at the last epoch."""
    if epochs <= 1:
        return base_lr
    lo = base_lr * final_ratio
    return lo + 0.5 * (base_lr - lo) * (1 + math.cos(math.pi * epoch / (epochs - 1)))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr_extractor: float = 0.1
    lr_head: float = 0.1
    lr_final_ratio: float = 0.01
    weight_decay_extractor: float = 1e-5
    weight_decay_head: float = 1e-4
    momentum: float = 0.9
    adversary: str = "pgd"
    attack: AttackConfig = AttackConfig(epsilon=8 / 255, alpha=2 / 255, iterations=7, random_start=True)
    wa_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if not (self.lr_extractor > 0 and self.lr_head > 0):
            raise UsageError("learning rates must be > 0")
        if self.adversary not in ("none", "pgd"):
            raise UsageError(f"adversary must be 'none' or 'pgd', got {self.adversary!r}")
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")


@dataclass
class EpochLog:
    epoch: int
    clean_loss: float
    adv_loss: float
    lr: float


LOG_HEADER = "epoch,clean_loss,adv_loss,lr\n"


class CsvLog:
    """Append-only CSV sink with a fixed header."""

    def __init__(self, fh: TextIO):
        self.fh = fh
        fh.write(LOG_HEADER)

    def __call__(self, row: EpochLog) -> None:
        self.fh.write(f"{row.epoch},{row.clean_loss:.9g},{row.adv_loss:.9g},{row.lr:.9g}\n")
        self.fh.flush()


def _ce_per_sample(net: Network):
    return lambda x, y: T.softmax_cross_entropy(net.logits(x), y, reduction="none")


def train_base(
    net: Network,
    data: LabeledSet,
    cfg: TrainConfig,
    log: Optional[Callable[[EpochLog], None]] = None,
) -> Network:
    """Train ``net`` in place and return it.

    Each mini-batch is replaced by its PGD perturbation (when
    ``adversary="pgd"``) computed against the weights at step start, followed
    by one SGD step on extractor and head and, with ``wa_enabled``, one EMA
    update of the extractor shadow.  The EMA shadow is reset to the current
    weights before the first step.
    """
    if len(data) == 0:
        raise DataError("train_base: empty dataset")
    if data.input_dim != net.spec.input_dim:
        raise DataError(f"train_base: data has {data.input_dim} inputs, network expects {net.spec.input_dim}")
    if data.labels.min() < 0 or data.labels.max() >= net.spec.num_base_classes:
        raise LabelError(f"train_base: labels must lie in [0, {net.spec.num_base_classes})")

    state_x = SgdState(cfg.momentum, 0.0)
    state_h = SgdState(cfg.momentum, 0.0)
    net.reset_ema()
    n = len(data)
    loss_fn = _ce_per_sample(net)
    for epoch in range(cfg.epochs):
        lr_x = cosine_lr(cfg.lr_extractor, cfg.lr_final_ratio, epoch, cfg.epochs)
        lr_h = cosine_lr(cfg.lr_head, cfg.lr_final_ratio, epoch, cfg.epochs)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        clean_sum = adv_sum = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            xb, yb = data.images[idx], data.labels[idx]
            if cfg.adversary == "pgd":
                att = replace(cfg.attack, seed=_batch_seed(cfg.attack.seed, epoch, b))
                res = pgd(loss_fn, xb, yb, att)
                x_train, clean = res.x_adv, res.loss_clean
            else:
                x_train, clean = xb, None
            params = net.parameter_tensors()
            loss = T.softmax_cross_entropy(net.logits(x_train, params=params), yb)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {b}")
            T.backward(loss)
            sgd_step(net.theta, {k: params[k].grad for k in net.theta}, state_x, lr_x, cfg.weight_decay_extractor)
            sgd_step(net.omega, {k: params[k].grad for k in net.omega}, state_h, lr_h, cfg.weight_decay_head)
            if cfg.wa_enabled:
                net.ema_update()
            clean_sum += (value if clean is None else clean) * len(idx)
            adv_sum += value * len(idx)
        if log is not None:
            log(EpochLog(epoch, clean_sum / n, adv_sum / n, lr_x))
    return net


def _batch_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch]).generate_state(1, np.uint64)[0])


def accuracy(net: Network, data: LabeledSet, use_ema: bool = False) -> float:
    pred = net.logits(data.images, use_ema=use_ema).data.argmax(axis=1)
    return float((pred == data.labels).mean())
