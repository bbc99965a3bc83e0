"""N-way K-shot episode sampling, the trial loop and its report."""

from __future__ import annotations

import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Optional, Sequence

import numpy as np

from .attack import AttackConfig
from .data_io import LabeledSet
from .errors import EpisodeError, UsageError
from .fewshot import BaseStats, ClassifierConfig, robust_eval_episode
from .network import Network, checkpoint_hash

Z95 = 1.96


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    q_queries: int = 15
    trials: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2:
            raise UsageError("n_way must be >= 2")
        if self.k_shot < 1 or self.q_queries < 1 or self.trials < 1:
            raise UsageError("k_shot, q_queries and trials must be >= 1")


@dataclass
class Episode:
    """One task; labels are episode-local ``0..n_way-1`` in ``class_ids`` order."""

    class_ids: tuple[int, ...]
    support_idx: np.ndarray
    query_idx: np.ndarray
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.class_ids)


def sample_episode(novel: LabeledSet, spec: EpisodeSpec, trial_index: int) -> Episode:
    """Deterministic in ``(spec.seed, trial_index)``; classes and samples drawn without replacement."""
    need = spec.k_shot + spec.q_queries
    eligible = [c for c in novel.classes if len(novel.class_index[c]) >= need]
    if len(novel.classes) < spec.n_way:
        raise EpisodeError(f"need {spec.n_way} novel classes, have {len(novel.classes)}")
    if len(eligible) < len(novel.classes):
        short = [c for c in novel.classes if c not in eligible]
        raise EpisodeError(f"class(es) {short} have fewer than k_shot + q_queries = {need} samples")
    rng = np.random.default_rng([spec.seed, trial_index])
    classes = rng.choice(np.asarray(novel.classes), size=spec.n_way, replace=False)
    support, query, sy, qy = [], [], [], []
    for label, c in enumerate(classes):
        picked = rng.choice(novel.class_index[int(c)], size=need, replace=False)
        support.append(picked[: spec.k_shot])
        query.append(picked[spec.k_shot :])
        sy.append(np.full(spec.k_shot, label))
        qy.append(np.full(spec.q_queries, label))
    s_idx, q_idx = np.concatenate(support), np.concatenate(query)
    return Episode(
        tuple(int(c) for c in classes),
        s_idx,
        q_idx,
        novel.images[s_idx],
        np.concatenate(sy).astype(np.int64),
        novel.images[q_idx],
        np.concatenate(qy).astype(np.int64),
    )


def ci95(values: Sequence[float]) -> float:
    """``1.96 * s / sqrt(n)`` with the n-1 sample deviation; 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(Z95 * v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class Metric:
    mean: float
    ci95: float
    trials: int
    per_trial: list[float]

    @classmethod
    def from_trials(cls, acc: Sequence[float]) -> "Metric":
        acc = [float(a) for a in acc]
        return cls(100.0 * float(np.mean(acc)), 100.0 * ci95(acc), len(acc), acc)


@dataclass
class EvalReport:
    """Means and ci95 in percent; ``per_trial`` holds fractions."""

    standard: Metric
    robust: Metric
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_text(self) -> str:
        out = io.StringIO()
        out.write("evaluation report\n")
        for name in ("standard", "robust"):
            m = getattr(self, name)
            out.write(f"{name}_accuracy: {m.mean:.4f} +- {m.ci95:.4f} (trials={m.trials})\n")
        out.write("metadata:\n")
        for k in sorted(self.metadata):
            out.write(f"  {k}: {self.metadata[k]}\n")
        return out.getvalue()

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("row,standard,robust\n")
        for i, (s, r) in enumerate(zip(self.standard.per_trial, self.robust.per_trial)):
            out.write(f"{i},{s:.9g},{r:.9g}\n")
        out.write(f"mean,{self.standard.mean:.9g},{self.robust.mean:.9g}\n")
        out.write(f"ci95,{self.standard.ci95:.9g},{self.robust.ci95:.9g}\n")
        return out.getvalue()


def _trial(net, clf, novel, spec, attack, stats, eval_seed, t):
    ep = sample_episode(novel, spec, t)
    att = replace(attack, seed=attack.seed + t)
    std, rob = robust_eval_episode(net, clf, ep, att, stats, novel_seed=eval_seed + t)
    n = len(ep.query_y)
    return std / n, rob / n


def _trial_chunk(args):
    net, clf, novel, spec, attack, stats, indices = args
    return [_trial(net, clf, novel, spec, attack, stats, spec.seed, t) for t in indices]


def run_trials(
    net: Network,
    clf: ClassifierConfig,
    novel: LabeledSet,
    spec: EpisodeSpec,
    attack: AttackConfig,
    stats: Optional[BaseStats] = None,
    jobs: int = 1,
    metadata: Optional[dict[str, Any]] = None,
) -> EvalReport:
    """Evaluate ``spec.trials`` episodes and aggregate per-trial accuracies.

    Trial ``t`` uses episode ``(spec.seed, t)``, attack seed
    ``attack.seed + t`` and linear-head seed ``spec.seed + t``, so the report
    does not depend on ``jobs``.  Any failing trial aborts the run.
    """
    indices = list(range(spec.trials))
    if jobs > 1 and spec.trials > 1:
        chunks = [indices[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_trial_chunk, [(net, clf, novel, spec, attack, stats, c) for c in chunks]))
        results = [None] * spec.trials
        for c, part in zip(chunks, parts):
            for t, r in zip(c, part):
                results[t] = r
    else:
        results = _trial_chunk((net, clf, novel, spec, attack, stats, indices))
    meta = {
        "classifier": clf.kind,
        "m": clf.m if clf.kind == "cnc" else (0 if clf.kind == "nc" else "n/a"),
        "tukey_lambda": clf.tukey.lam,
        "use_ema": clf.use_ema,
        "temperature": clf.temperature,
        "n_way": spec.n_way,
        "k_shot": spec.k_shot,
        "q_queries": spec.q_queries,
        "trials": spec.trials,
        "episode_seed": spec.seed,
        "attack_epsilon": attack.epsilon,
        "attack_alpha": attack.alpha,
        "attack_iterations": attack.iterations,
        "attack_random_start": attack.random_start,
        "attack_seed": attack.seed,
        "checkpoint_sha256": checkpoint_hash(net),
    }
    if clf.kind.startswith("linear"):
        meta["novel_train"] = asdict(clf.novel)
    if spec.trials == 1:
        meta["ci95_note"] = "single trial; ci95 reported as 0"
    if metadata:
        meta.update(metadata)
    return EvalReport(
        Metric.from_trials([r[0] for r in results]),
        Metric.from_trials([r[1] for r in results]),
        meta,
    )


def default_jobs() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))
