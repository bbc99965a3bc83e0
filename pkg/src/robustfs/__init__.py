"""Adversarially robust few-shot classification.

Phase one adversarially trains an MLP feature extractor on base classes and
keeps an exponential moving average of its weights.  Phase two classifies
novel classes with the frozen extractor, either with a calibrated nearest
centroid classifier or a linear head, and measures clean and PGD accuracy
over sampled episodes.
"""

from .attack import AttackConfig, AttackResult, fgsm, pgd
from .data_io import LabeledSet, SplitManifest, SyntheticSpec, apply_split, gen_synthetic, load_csv, load_idx
from .episodes import EpisodeSpec, EvalReport, ci95, run_trials, sample_episode
from .fewshot import (
    BaseStats,
    CentroidSet,
    ClassifierConfig,
    NovelTrainConfig,
    TukeyConfig,
    base_stats,
    cnc_centroids,
    nc_predict,
    robust_eval_episode,
    train_novel_linear,
    tukey,
)
from .network import MlpSpec, Network
from .tensor import Tensor, backward, grad_check
from .training import SgdState, TrainConfig, sgd_step, train_base

__version__ = "0.1.0"
