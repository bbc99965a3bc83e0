"""Flat ``key = value`` run configuration.

Every key is declared in ``KEYS`` with a parser and a default; ``REQUIRED``
marks keys without one.  Unknown keys are errors.  ``#`` starts a comment.
Float values also accept fractions such as ``8/255``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

from .errors import ConfigError

REQUIRED = object()


def parse_float(text: str) -> float:
    text = text.strip()
    try:
        if "/" in text:
            return float(Fraction(text))
        return float(text)
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"not a number: {text!r}") from None


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def parse_choice(*choices: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip()
        if t not in choices:
            raise ValueError(f"expected one of {', '.join(choices)}, got {t!r}")
        return t

    return parse


def parse_str(text: str) -> str:
    return text.strip()


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


KEYS: dict[str, Key] = {
    # data
    "data": Key(parse_str, "", "CSV dataset path (label, pixels...)"),
    "idx_images": Key(parse_str, "", "IDX image file; used when data is empty"),
    "idx_labels": Key(parse_str, "", "IDX label file"),
    "manifest": Key(parse_str, REQUIRED, "split manifest path"),
    # model
    "hidden_dims": Key(parse_int_list, (256, 128)),
    "feature_dim": Key(int, 64),
    "init_seed": Key(int, 0),
    "ema_tau": Key(parse_float, 0.999),
    # base training
    "epochs": Key(int, 60),
    "batch_size": Key(int, 64),
    "lr_extractor": Key(parse_float, 0.1),
    "lr_head": Key(parse_float, 0.1),
    "lr_final_ratio": Key(parse_float, 0.01),
    "weight_decay_extractor": Key(parse_float, 1e-5),
    "weight_decay_head": Key(parse_float, 1e-4),
    "momentum": Key(parse_float, 0.9),
    "adversary": Key(parse_choice("none", "pgd"), "pgd"),
    "wa": Key(parse_bool, True),
    "train_seed": Key(int, 0),
    "train_eps": Key(parse_float, 8 / 255),
    "train_alpha": Key(parse_float, 2 / 255),
    "train_iters": Key(int, 7),
    "train_random_start": Key(parse_bool, True),
    "train_attack_seed": Key(int, 0),
    # evaluation
    "classifier": Key(parse_choice("cnc", "nc", "linear", "linear-adv7", "linear-adv20"), "cnc"),
    "m": Key(int, 2),
    "n_way": Key(int, 5),
    "k_shot": Key(int, 1),
    "q_queries": Key(int, 15),
    "trials": Key(int, 1000),
    "eval_seed": Key(int, 0),
    "eps": Key(parse_float, 8 / 255),
    "alpha": Key(parse_float, 2 / 255),
    "iters": Key(int, 20),
    "random_start": Key(parse_bool, True),
    "attack_seed": Key(int, 0),
    "use_ema": Key(parse_choice("auto", "on", "off"), "auto", "auto: on when the checkpoint carries EMA weights"),
    "tukey_lambda": Key(parse_float, 0.5),
    "temperature": Key(parse_float, 1.0),
    "novel_lr": Key(parse_float, 0.01),
    "novel_momentum": Key(parse_float, 0.9),
    "novel_dampening": Key(parse_float, 0.9),
    "novel_weight_decay": Key(parse_float, 1e-3),
    "novel_epochs": Key(int, 100),
    "novel_batch_size": Key(int, 4),
    "jobs": Key(int, 0, "parallel trial workers; 0 = available cores"),
    # synthetic data
    "num_classes": Key(int, 35),
    "samples_per_class": Key(int, 200),
    "side": Key(int, 8),
    "template_scale": Key(parse_float, 1.0),
    "noise_sigma": Key(parse_float, 0.15),
    "data_seed": Key(int, 7),
    "n_base": Key(int, 20),
    "n_val": Key(int, 5),
    "n_novel": Key(int, 10),
}


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved values for every key; missing required keys stay unset."""

    def __init__(self, values: Optional[dict[str, Any]] = None):
        self._values: dict[str, Any] = {}
        for name, key in KEYS.items():
            if key.default is not REQUIRED:
                self._values[name] = key.default
        for name, value in (values or {}).items():
            self.set(name, value)

    def set(self, name: str, value: Any) -> None:
        if name not in KEYS:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(value, str):
            try:
                value = KEYS[name].parse(value)
            except ValueError as exc:
                raise ConfigError(f"config key {name!r}: {exc}") from None
        self._values[name] = value

    def __getitem__(self, name: str) -> Any:
        if name not in KEYS:
            raise ConfigError(f"unknown config key {name!r}")
        if name not in self._values:
            raise ConfigError(f"missing required config key {name!r}")
        return self._values[name]

    def require(self, names: Iterable[str]) -> None:
        for name in names:
            self[name]

    def update_text(self, lines: Iterable[str], source: str = "<config>") -> None:
        for lineno, raw in enumerate(lines, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            name, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            name = name.strip()
            if name not in KEYS:
                raise ConfigError(f"{source}:{lineno}: unknown config key {name!r}")
            self.set(name, value.strip())

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        cfg.update_text(Path(path).read_text().splitlines(), str(path))
        return cfg

    def to_text(self) -> str:
        return "".join(f"{name} = {_format(self._values[name])}\n" for name in KEYS if name in self._values)
