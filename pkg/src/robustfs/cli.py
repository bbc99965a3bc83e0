"""Command-line entry point: ``robustfs {gen-data,train-base,eval,sweep}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command writes the fully resolved config and its exact command line
next to its outputs.
"""

from __future__ import annotations

import argparse
import shlex
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .attack import AttackConfig
from .config import RunConfig, parse_float
from .data_io import (
    LabeledSet,
    SplitManifest,
    SyntheticSpec,
    apply_split,
    gen_synthetic,
    load_csv,
    load_idx,
    read_manifest,
    save_csv,
    write_manifest,
)
from .episodes import EpisodeSpec, EvalReport, default_jobs, run_trials
from .errors import ConfigError, DataError, NumericError, RobustFSError, UsageError
from .fewshot import ClassifierConfig, NovelTrainConfig, TukeyConfig, base_stats
from .network import MlpSpec, Network
from .training import CsvLog, TrainConfig, train_base

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SWEEP_HEADER = "value,standard_mean,standard_ci95,robust_mean,robust_ci95\n"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--classifier", choices=("cnc", "nc", "linear", "linear-adv7", "linear-adv20"))
    p.add_argument("--n", dest="n_way", type=int)
    p.add_argument("--k", dest="k_shot", type=int)
    p.add_argument("--q", dest="q_queries", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--eps", type=str)
    p.add_argument("--alpha", type=str)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", dest="eval_seed", type=int)
    p.add_argument("--use-ema", dest="use_ema", choices=("on", "off", "auto"))
    p.add_argument("--jobs", type=int)
    p.add_argument("--out-dir", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robustfs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset and split manifest")
    _add_common(g)
    g.add_argument("--out", required=True, help="output prefix; writes PREFIX.csv and PREFIX.manifest")
    for flag, key in (
        ("--num-classes", "num_classes"),
        ("--samples-per-class", "samples_per_class"),
        ("--side", "side"),
        ("--template-scale", "template_scale"),
        ("--noise-sigma", "noise_sigma"),
        ("--seed", "data_seed"),
        ("--n-base", "n_base"),
        ("--n-val", "n_val"),
        ("--n-novel", "n_novel"),
    ):
        g.add_argument(flag, dest=key, type=str)

    t = sub.add_parser("train-base", help="adversarial base training")
    _add_common(t)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--adv", dest="adversary", choices=("pgd", "none"))
    t.add_argument("--no-wa", dest="no_wa", action="store_true", help="disable weight averaging")

    e = sub.add_parser("eval", help="episodic standard and robust accuracy")
    _add_common(e)
    _add_eval_flags(e)

    s = sub.add_parser("sweep", help="evaluate along one axis and write one CSV")
    _add_common(s)
    _add_eval_flags(s)
    s.add_argument("--axis", required=True, choices=("m", "eps", "iters"))
    s.add_argument("--values", required=True, help="comma-separated axis values")
    return parser


def _resolve(args: argparse.Namespace, flag_keys: Sequence[str]) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value.strip())
    for key in flag_keys:
        value = getattr(args, key, None)
        if value is not None:
            cfg.set(key, str(value))
    return cfg


def _write_run_files(directory: Path, cfg: RunConfig, argv: Sequence[str], prefix: str = "") -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{prefix}config.txt").write_text(cfg.to_text())
    (directory / f"{prefix}command.txt").write_text(shlex.join(["robustfs", *argv]) + "\n")


def load_dataset(cfg: RunConfig) -> tuple[LabeledSet, LabeledSet, LabeledSet]:
    if cfg["data"]:
        data = load_csv(cfg["data"])
    elif cfg["idx_images"] and cfg["idx_labels"]:
        data = load_idx(cfg["idx_images"], cfg["idx_labels"])
    else:
        raise ConfigError("missing required config key 'data' (or 'idx_images' and 'idx_labels')")
    return apply_split(data, read_manifest(cfg["manifest"]))


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr_extractor=cfg["lr_extractor"],
        lr_head=cfg["lr_head"],
        lr_final_ratio=cfg["lr_final_ratio"],
        weight_decay_extractor=cfg["weight_decay_extractor"],
        weight_decay_head=cfg["weight_decay_head"],
        momentum=cfg["momentum"],
        adversary=cfg["adversary"],
        attack=AttackConfig(
            cfg["train_eps"], cfg["train_alpha"], cfg["train_iters"], cfg["train_random_start"], cfg["train_attack_seed"]
        ),
        wa_enabled=cfg["wa"],
        seed=cfg["train_seed"],
    )


def _attack(cfg: RunConfig) -> AttackConfig:
    return AttackConfig(cfg["eps"], cfg["alpha"], cfg["iters"], cfg["random_start"], cfg["attack_seed"])


def _classifier(cfg: RunConfig, use_ema: bool) -> ClassifierConfig:
    novel = NovelTrainConfig(
        cfg["novel_lr"],
        cfg["novel_momentum"],
        cfg["novel_dampening"],
        cfg["novel_weight_decay"],
        cfg["novel_epochs"],
        cfg["novel_batch_size"],
    )
    return ClassifierConfig(cfg["classifier"], cfg["m"], TukeyConfig(cfg["tukey_lambda"]), use_ema, cfg["temperature"], novel)


def _episode_spec(cfg: RunConfig) -> EpisodeSpec:
    return EpisodeSpec(cfg["n_way"], cfg["k_shot"], cfg["q_queries"], cfg["trials"], cfg["eval_seed"])


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, argv) -> None:
    cfg = _resolve(args, ("num_classes", "samples_per_class", "side", "template_scale", "noise_sigma", "data_seed", "n_base", "n_val", "n_novel"))
    n_base, n_val, n_novel = cfg["n_base"], cfg["n_val"], cfg["n_novel"]
    if min(n_base, n_val, n_novel) < 0 or n_base + n_val + n_novel > cfg["num_classes"]:
        raise UsageError("n_base + n_val + n_novel must not exceed num_classes")
    spec = SyntheticSpec(cfg["num_classes"], cfg["samples_per_class"], cfg["side"], cfg["template_scale"], cfg["noise_sigma"], cfg["data_seed"])
    data = gen_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(f"{out}.csv", data)
    ids = list(range(cfg["num_classes"]))
    manifest = SplitManifest(
        tuple(ids[:n_base]), tuple(ids[n_base : n_base + n_val]), tuple(ids[n_base + n_val : n_base + n_val + n_novel])
    )
    write_manifest(f"{out}.manifest", manifest)
    cfg.set("data", f"{out}.csv")
    cfg.set("manifest", f"{out}.manifest")
    _write_run_files(out.parent, cfg, argv, prefix=f"{out.name}.")


def cmd_train_base(args, argv) -> None:
    cfg = _resolve(args, ("adversary",))
    if args.no_wa:
        cfg.set("wa", False)
    cfg.require(("manifest",))
    base, _, _ = load_dataset(cfg)
    spec = MlpSpec(base.input_dim, cfg["hidden_dims"], cfg["feature_dim"], len(base.classes))
    net = Network.init(spec, seed=cfg["init_seed"], ema_tau=cfg["ema_tau"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{out}.log.csv", "w") as fh:
        train_base(net, base, train_config(cfg), log=CsvLog(fh))
    if not cfg["wa"]:
        net.ema_theta = {}
    net.save(out)
    _write_run_files(out.parent, cfg, argv, prefix=f"{out.name}.")


def _prepare_eval(args, extra_keys=()):
    keys = ("classifier", "n_way", "k_shot", "q_queries", "trials", "m", "eps", "alpha", "iters", "eval_seed", "use_ema", "jobs", *extra_keys)
    cfg = _resolve(args, keys)
    cfg.require(("manifest",))
    net = Network.load(args.checkpoint)
    mode = cfg["use_ema"]
    if mode == "auto":
        use_ema = bool(net.ema_theta)
    else:
        use_ema = mode == "on"
    if use_ema and not net.ema_theta:
        raise UsageError("--use-ema on, but the checkpoint has no EMA weights (trained with --no-wa)")
    cfg.set("use_ema", "on" if use_ema else "off")
    base, _, novel = load_dataset(cfg)
    jobs = cfg["jobs"] or default_jobs()
    clf = _classifier(cfg, use_ema)
    stats = None
    if clf.kind == "cnc" or getattr(args, "axis", None) == "m":
        stats = base_stats(net, base, clf.tukey, use_ema=use_ema)
    return cfg, net, novel, clf, stats, jobs


def cmd_eval(args, argv) -> EvalReport:
    cfg, net, novel, clf, stats, jobs = _prepare_eval(args)
    report = run_trials(net, clf, novel, _episode_spec(cfg), _attack(cfg), stats, jobs=jobs, metadata={"checkpoint": args.checkpoint})
    out = Path(args.out_dir)
    _write_run_files(out, cfg, argv)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.csv").write_text(report.to_csv())
    print(report.to_text(), end="")
    return report


def parse_values(axis: str, text: str) -> list:
    try:
        if axis == "eps":
            return [parse_float(v) for v in text.split(",") if v.strip()]
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values: cannot parse {text!r} for axis {axis}") from None


def cmd_sweep(args, argv) -> list[tuple]:
    values = parse_values(args.axis, args.values)
    if not values:
        raise UsageError("--values is empty")
    cfg, net, novel, clf, stats, jobs = _prepare_eval(args)
    if args.axis == "m" and clf.kind not in ("cnc", "nc"):
        raise UsageError("--axis m needs --classifier cnc")
    spec, attack = _episode_spec(cfg), _attack(cfg)
    rows = []
    for v in values:
        c, a = clf, attack
        if args.axis == "m":
            c = replace(clf, kind="cnc", m=v)
        elif args.axis == "eps":
            a = replace(attack, epsilon=v)
        else:
            a = replace(attack, iterations=v)
        r = run_trials(net, c, novel, spec, a, stats, jobs=jobs)
        rows.append((v, r.standard.mean, r.standard.ci95, r.robust.mean, r.robust.ci95))
        print(f"{args.axis}={v}: standard {r.standard.mean:.2f} +- {r.standard.ci95:.2f}, robust {r.robust.mean:.2f} +- {r.robust.ci95:.2f}")
    out = Path(args.out_dir)
    _write_run_files(out, cfg, argv)
    with open(out / "sweep.csv", "w") as fh:
        fh.write(SWEEP_HEADER.replace("value", args.axis, 1))
        for row in rows:
            fh.write(f"{row[0]!r}," + ",".join(f"{x:.9g}" for x in row[1:]) + "\n")
    return rows


COMMANDS = {"gen-data": cmd_gen_data, "train-base": cmd_train_base, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"robustfs: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"robustfs: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"robustfs: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RobustFSError as exc:
        print(f"robustfs: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"robustfs: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
