"""Phase two: classifiers for novel classes on top of the frozen extractor.

Calibrated nearest centroid (CNC) works in square-root transformed feature
space.  Each support feature is averaged with the means of its ``m`` nearest
base classes; the per-sample centroids of one class are then averaged, and
queries take the label of the centroid with the largest cosine similarity.
``m = 0`` is the plain nearest-centroid classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .attack import AttackConfig, pgd
from .data_io import LabeledSet
from .errors import DataError, NumericError, UsageError, ZeroVectorError
from .network import Network
from .tensor import Tensor
from .training import SgdState, sgd_step

CLASSIFIERS = ("cnc", "nc", "linear", "linear-adv7", "linear-adv20")


@dataclass(frozen=True)
class TukeyConfig:
    lam: float = 0.5

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise UsageError(f"tukey lambda must lie in (0, 1], got {self.lam}")


def tukey(z, cfg: TukeyConfig = TukeyConfig()) -> Tensor:
    """Elementwise ``max(z, 0) ** lam``."""
    return T.power(z, cfg.lam)


@dataclass
class BaseStats:
    """Mean transformed feature of every base class, rows in ``class_ids`` order."""

    means: np.ndarray
    class_ids: tuple[int, ...]

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)


def base_stats(
    net: Network,
    base: LabeledSet,
    tukey_cfg: TukeyConfig = TukeyConfig(),
    use_ema: bool = True,
    num_classes: Optional[int] = None,
    batch_size: int = 1024,
) -> BaseStats:
    """Per-class means of ``tukey(features(x))`` over clean base samples.

    ``num_classes`` (default: the network's base class count) fixes which
    ids must be present; a missing class is an error.
    """
    k = net.spec.num_base_classes if num_classes is None else num_classes
    missing = [c for c in range(k) if c not in base.class_index]
    if missing:
        raise DataError(f"base_stats: no samples for base class(es) {missing}")
    sums = np.zeros((k, net.spec.feature_dim), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    for start in range(0, len(base), batch_size):
        xb = base.images[start : start + batch_size]
        yb = base.labels[start : start + batch_size]
        z = tukey(net.features(xb, use_ema=use_ema), tukey_cfg).data.astype(np.float64)
        np.add.at(sums, yb, z)
        counts += np.bincount(yb, minlength=k)[:k]
    means = (sums / counts[:, None]).astype(np.float32)
    return BaseStats(means, tuple(range(k)))


@dataclass
class CentroidSet:
    centroids: np.ndarray
    classes: tuple[int, ...]
    m_used: int


def nearest_base(z: np.ndarray, stats: BaseStats, m: int) -> np.ndarray:
    """Row indices of the ``m`` base means closest to ``z`` in Euclidean distance.

    Ties go to the lower class id.
    """
    d = ((stats.means.astype(np.float64) - np.asarray(z, dtype=np.float64)) ** 2).sum(axis=1)
    return np.argsort(d, kind="stable")[:m]


def cnc_centroids(support_z, support_y, stats: Optional[BaseStats], m: int) -> CentroidSet:
    """Calibrated centroids, one per support class, in ascending label order.

    For each support sample ``z`` the centroid is ``(z + sum of its m nearest
    base means) / (m + 1)``; a class centroid is the mean over its samples.
    """
    support_z = np.asarray(support_z, dtype=np.float32)
    support_y = np.asarray(support_y)
    if m < 0:
        raise UsageError(f"m must be >= 0, got {m}")
    n_base = 0 if stats is None else stats.num_classes
    if m > n_base:
        raise UsageError(f"m = {m} exceeds the number of base classes ({n_base})")
    if support_z.ndim != 2 or support_y.shape != (support_z.shape[0],):
        raise DataError(f"support features {support_z.shape} and labels {support_y.shape} do not line up")
    classes = tuple(int(c) for c in np.unique(support_y))
    per_sample = support_z.astype(np.float64)
    if m:
        base = stats.means.astype(np.float64)
        calibrated = np.empty_like(per_sample)
        for i, z in enumerate(per_sample):
            calibrated[i] = (z + base[nearest_base(z, stats, m)].sum(axis=0)) / (m + 1)
        per_sample = calibrated
    centroids = np.stack([per_sample[support_y == c].mean(axis=0) for c in classes]).astype(np.float32)
    return CentroidSet(centroids, classes, m)


def cosine_scores(query: Tensor, centroids: np.ndarray) -> Tensor:
    """``[n_query, n_centroids]`` cosine similarities; differentiable wrt ``query``."""
    c = np.asarray(centroids, dtype=np.float32)
    norms = np.linalg.norm(c.astype(np.float64), axis=1)
    if np.any(norms == 0):
        raise ZeroVectorError(f"cosine_scores: zero centroid at row(s) {np.flatnonzero(norms == 0).tolist()}")
    c_unit = c / np.sqrt((c * c).sum(axis=1, keepdims=True))
    return T.matmul(T.l2_normalize(query), Tensor(c_unit.T))


def nc_predict(query_z, centroids: CentroidSet) -> tuple[np.ndarray, np.ndarray]:
    """Labels with the largest cosine score (lowest index on ties) and the scores."""
    if len(centroids.classes) == 0:
        raise UsageError("nc_predict: no centroids")
    scores = cosine_scores(Tensor(np.asarray(query_z, dtype=np.float32)), centroids.centroids).data
    return np.asarray(centroids.classes)[scores.argmax(axis=1)], scores


# -------------------------------------------------------------- linear head


@dataclass(frozen=True)
class NovelTrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    dampening: float = 0.9
    weight_decay: float = 1e-3
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0


@dataclass
class NovelLinearHead:
    weight: np.ndarray
    bias: np.ndarray

    def logits(self, z) -> Tensor:
        return T.affine(z, self.weight, self.bias)

    def predict(self, z) -> np.ndarray:
        return self.logits(z).data.argmax(axis=1)


NOVEL_ADVERSARIES = {"none": 0, "pgd7": 7, "pgd20": 20}


def train_novel_linear(
    net: Network,
    support_x: np.ndarray,
    support_y: np.ndarray,
    n_way: int,
    cfg: NovelTrainConfig = NovelTrainConfig(),
    adversary: str = "none",
    attack: Optional[AttackConfig] = None,
    use_ema: bool = True,
) -> NovelLinearHead:
    """Fit a zero-initialized linear head on frozen extractor features.

    With ``adversary`` ``"pgd7"``/``"pgd20"`` every mini-batch of support
    images is replaced by its PGD perturbation against the current head
    before the step; ``attack`` supplies eps, step size and seed while the
    iteration count comes from the adversary name.
    """
    if adversary not in NOVEL_ADVERSARIES:
        raise UsageError(f"unknown novel adversary {adversary!r}")
    support_y = np.asarray(support_y, dtype=np.int64)
    empty = [c for c in range(n_way) if not np.any(support_y == c)]
    if empty:
        raise DataError(f"train_novel_linear: no support samples for class(es) {empty}")
    d = net.spec.feature_dim
    head = NovelLinearHead(np.zeros((d, n_way), dtype=np.float32), np.zeros(n_way, dtype=np.float32))
    state = SgdState(cfg.momentum, cfg.dampening)
    iters = NOVEL_ADVERSARIES[adversary]
    if iters:
        if attack is None:
            raise UsageError("adversarial novel training needs an attack config")

        def loss_fn(x, y):
            return T.softmax_cross_entropy(head.logits(net.features(x, use_ema=use_ema)), y, reduction="none")

    else:
        clean_z = net.features(support_x, use_ema=use_ema).data
    n = len(support_y)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            yb = support_y[idx]
            if iters:
                att = replace(attack, iterations=iters, seed=attack.seed + epoch * 1_000_003 + b)
                xb = pgd(loss_fn, support_x[idx], yb, att).x_adv
                zb = net.features(xb, use_ema=use_ema).data
            else:
                zb = clean_z[idx]
            w = Tensor(head.weight, requires_grad=True)
            bias = Tensor(head.bias, requires_grad=True)
            T.backward(T.softmax_cross_entropy(T.affine(zb, w, bias), yb))
            sgd_step({"w": head.weight, "b": head.bias}, {"w": w.grad, "b": bias.grad}, state, cfg.lr, cfg.weight_decay)
    return head


# -------------------------------------------------------- episode evaluation


@dataclass(frozen=True)
class ClassifierConfig:
    kind: str = "cnc"
    m: int = 2
    tukey: TukeyConfig = TukeyConfig()
    use_ema: bool = True
    temperature: float = 1.0
    novel: NovelTrainConfig = NovelTrainConfig()

    def __post_init__(self):
        if self.kind not in CLASSIFIERS:
            raise UsageError(f"classifier must be one of {CLASSIFIERS}, got {self.kind!r}")
        if not self.temperature > 0:
            raise UsageError("temperature must be > 0")


def episode_logits_fn(
    net: Network,
    clf: ClassifierConfig,
    support_x: np.ndarray,
    support_y: np.ndarray,
    n_way: int,
    stats: Optional[BaseStats],
    attack: Optional[AttackConfig] = None,
    novel_seed: int = 0,
) -> Callable[[Tensor], Tensor]:
    """Build the episode classifier from its support set; return ``x -> logits``.

    For cnc/nc the logits are cosine scores (divided by the temperature) of
    the transformed query features against the centroids, differentiable all
    the way to the input.  For the linear kinds they are the head's affine
    outputs, and predictions are exactly their argmax.
    """
    if clf.kind in ("cnc", "nc"):
        m = 0 if clf.kind == "nc" else clf.m
        z = tukey(net.features(support_x, use_ema=clf.use_ema), clf.tukey).data
        cents = cnc_centroids(z, support_y, stats, m)
        if cents.classes != tuple(range(n_way)):
            raise DataError("episode support must cover labels 0..n_way-1")

        def logits(x):
            s = cosine_scores(tukey(net.features(x, use_ema=clf.use_ema), clf.tukey), cents.centroids)
            return s if clf.temperature == 1 else s * (1.0 / clf.temperature)

        return logits
    adversary = {"linear": "none", "linear-adv7": "pgd7", "linear-adv20": "pgd20"}[clf.kind]
    head = train_novel_linear(
        net, support_x, support_y, n_way, replace(clf.novel, seed=novel_seed), adversary, attack, clf.use_ema
    )
    return lambda x: head.logits(net.features(x, use_ema=clf.use_ema))


def robust_eval_episode(
    net: Network,
    clf: ClassifierConfig,
    episode,
    attack: AttackConfig,
    stats: Optional[BaseStats] = None,
    novel_seed: int = 0,
) -> tuple[int, int]:
    """(clean correct, PGD-attacked correct) counts on the episode's queries."""
    logits = episode_logits_fn(
        net, clf, episode.support_x, episode.support_y, episode.n_way, stats, attack, novel_seed
    )
    qx, qy = episode.query_x, episode.query_y
    std = _correct(logits(Tensor(qx)).data, qy, "clean")
    res = pgd(lambda x, y: T.softmax_cross_entropy(logits(x), y, reduction="none"), qx, qy, attack)
    rob = _correct(logits(Tensor(res.x_adv)).data, qy, "attacked")
    return std, rob


def _correct(scores: np.ndarray, labels: np.ndarray, what: str) -> int:
    if not np.all(np.isfinite(scores)):
        raise NumericError(f"non-finite classifier scores on {what} queries")
    return int((scores.argmax(axis=1) == labels).sum())
