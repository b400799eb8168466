"""Command-line entry point: ``unionrobust {train,attack,eval,curve,inspect-filters}``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .adversary import PerturbationSpec
from .data_io import FormatError, load_checkpoint, load_idx, save_checkpoint, synth_blobs, synth_rings
from .evaluation import (
    AttackSuite,
    NotConvolutionalError,
    attack_success,
    default_suite,
    eval_rngs,
    evaluate,
    filter_sparsity_report,
    robustness_curve,
    run_attack,
)
from .geometry import NormKind
from .models import ModelSpec, predict_logits
from .training import NumericalError, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

NORMS = ("linf", "l2", "l1")

_DEFAULTS: Dict[str, str] = {
    "data.source": "blobs",
    "data.n_train": "1000",
    "data.n_test": "500",
    "data.classes": "2",
    "data.margin": "0.05",
    "data.noise": "0.3",
    "data.seed": "0",
    "data.train_images": "",
    "data.train_labels": "",
    "data.test_images": "",
    "data.test_labels": "",
    "train.arch": "mlp",
    "train.widths": "32,32",
    "train.scaled": "false",
    "train.strategy": "msd",
    "train.norms": "linf,l2,l1",
    "train.optimizer": "adam",
    "train.lr_schedule": "0:0,6:1e-3,15:0",
    "train.momentum": "0.9",
    "train.weight_decay": "0",
    "train.epochs": "15",
    "train.batch_size": "50",
    "train.seed": "0",
    "train.msd_iterations": "",
    "train.chunk_size": "64",
    "eval.attacks": "all",
    "eval.trials": "5",
    "eval.pointwise_restarts": "",
    "eval.seed": "0",
    "eval.chunk": "100",
    "eval.n": "",
    "eval.grid": "",
}
for _norm, (_eps, _alpha) in {"linf": ("0.3", "0.01"), "l2": ("2.0", "0.1"), "l1": ("10", "0.8")}.items():
    _DEFAULTS.update({
        f"attack.{_norm}.epsilon": _eps,
        f"attack.{_norm}.alpha": _alpha,
        f"attack.{_norm}.iterations": "50",
        f"attack.{_norm}.restarts": "1",
        f"attack.{_norm}.eval_iterations": "",
        f"attack.{_norm}.eval_restarts": "",
        f"attack.{_norm}.eval_alpha": "",
    })
_DEFAULTS.update({"attack.l1.k_min": "5", "attack.l1.k_max": "20", "attack.linf.momentum": "0.9"})


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    values: Dict[str, str]

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "Config":
        values = dict(_DEFAULTS)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cls._check_key(key, f"{source}:{lineno}")
            values[key] = value
        return cls(values)

    @classmethod
    def load(cls, path: Optional[str]) -> "Config":
        if path is None:
            return cls(dict(_DEFAULTS))
        p = Path(path)
        if not p.exists():
            preset = resources.files("unionrobust") / "presets" / f"{path}.cfg"
            if preset.is_file():
                return cls.parse(preset.read_text(encoding="utf-8"), f"preset {path}")
            raise ConfigError(f"config file not found: {path}")
        return cls.parse(p.read_text(encoding="utf-8"), str(p))

    @staticmethod
    def _check_key(key: str, where: str) -> None:
        if key not in _DEFAULTS:
            raise ConfigError(f"{where}: unknown config key {key!r}")

    def set(self, key: str, value) -> None:
        self._check_key(key, "override")
        self.values[key] = str(value)

    def get(self, key: str) -> str:
        return self.values[key]

    def _typed(self, key, conv):
        raw = self.values[key]
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc

    def int(self, key: str) -> int:
        return self._typed(key, int)

    def float(self, key: str) -> float:
        return self._typed(key, float)

    def optional_int(self, key: str) -> Optional[int]:
        return None if self.values[key] == "" else self.int(key)

    def bool(self, key: str) -> bool:
        raw = self.values[key].lower()
        if raw not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"bad boolean for {key}: {raw!r}")
        return raw in ("true", "1", "yes")

    def list(self, key: str) -> List[str]:
        return [p.strip() for p in self.values[key].split(",") if p.strip()]


# config -> objects ------------------------------------------------------------


def model_spec(cfg: Config, dataset) -> ModelSpec:
    arch = cfg.get("train.arch")
    if arch == "mnist_cnn":
        return ModelSpec.mnist(scaled=cfg.bool("train.scaled"))
    if arch == "mlp":
        widths = tuple(cfg._typed("train.widths", lambda s: [int(w) for w in s.split(",") if w.strip()]))
        n_features = int(np.prod(dataset.inputs.shape[1:]))
        return ModelSpec.mlp(n_features, cfg.int("data.classes"), widths)
    raise ConfigError(f"unknown train.arch {arch!r}")


def load_data(cfg: Config, split: str):
    source = cfg.get("data.source")
    n = cfg.int(f"data.n_{split}")
    if source == "blobs":
        seed = cfg.int("data.seed") + (0 if split == "train" else 1)
        return synth_blobs(n, cfg.int("data.classes"), cfg.float("data.margin"), cfg.float("data.noise"), seed, split)
    if source == "rings":
        return synth_rings(n, cfg.int("data.seed") + (0 if split == "train" else 1), split)
    if source == "idx":
        images, labels = cfg.get(f"data.{split}_images"), cfg.get(f"data.{split}_labels")
        if not images or not labels:
            raise ConfigError(f"data.source=idx needs data.{split}_images and data.{split}_labels")
        try:
            return load_idx(images, labels, split).subset(n)
        except OSError as exc:
            raise ConfigError(f"cannot read dataset: {exc}") from exc
    raise ConfigError(f"unknown data.source {source!r}")


def attack_spec(cfg: Config, norm: str, phase: str = "train") -> PerturbationSpec:
    p = f"attack.{norm}."
    iterations, restarts, alpha = cfg.int(p + "iterations"), cfg.int(p + "restarts"), cfg.float(p + "alpha")
    if phase == "eval":
        iterations = cfg.optional_int(p + "eval_iterations") or iterations
        restarts = cfg.optional_int(p + "eval_restarts") or restarts
        alpha = cfg.float(p + "eval_alpha") if cfg.get(p + "eval_alpha") else alpha
    k_range = (cfg.int(p + "k_min"), cfg.int(p + "k_max")) if norm == "l1" else (5, 20)
    momentum = cfg.float(p + "momentum") if norm == "linf" else 0.0
    try:
        return PerturbationSpec.make(norm, cfg.float(p + "epsilon"), alpha, iterations, restarts, k_range,
                                     momentum if phase == "eval" else 0.0)
    except ValueError as exc:
        raise ConfigError(f"{p}*: {exc}") from exc


def train_config(cfg: Config, threads: int) -> TrainConfig:
    try:
        norms = [NormKind.parse(n).value for n in cfg.list("train.norms")]
    except ValueError as exc:
        raise ConfigError(f"train.norms: {exc}") from exc
    schedule = cfg._typed("train.lr_schedule",
                          lambda s: [tuple(float(v) for v in pt.split(":")) for pt in s.split(",") if pt.strip()])
    if any(len(pt) != 2 for pt in schedule):
        raise ConfigError("train.lr_schedule must be epoch:lr pairs")
    try:
        return TrainConfig(
            strategy=cfg.get("train.strategy"),
            specs=tuple(attack_spec(cfg, n) for n in norms) if cfg.get("train.strategy") != "clean" else (),
            msd_iterations=cfg.optional_int("train.msd_iterations"),
            optimizer=cfg.get("train.optimizer"),
            momentum=cfg.float("train.momentum"),
            weight_decay=cfg.float("train.weight_decay"),
            schedule=tuple(schedule),
            epochs=cfg.int("train.epochs"),
            batch_size=cfg.int("train.batch_size"),
            seed=cfg.int("train.seed"),
            threads=threads,
            chunk_size=cfg.int("train.chunk_size"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_suite(cfg: Config) -> AttackSuite:
    specs = {NormKind.parse(n): attack_spec(cfg, n, "eval") for n in NORMS}
    suite = default_suite(specs, trials=cfg.int("eval.trials"),
                          pointwise_restarts=cfg.optional_int("eval.pointwise_restarts"))
    wanted = cfg.list("eval.attacks")
    if wanted == ["all"]:
        return suite
    if wanted == ["none"] or not wanted:
        return AttackSuite()
    unknown = [a for a in wanted if a not in suite.ids()]
    if unknown:
        raise ConfigError(f"unknown attack id(s) {unknown}; known: {suite.ids()}")
    return AttackSuite([e for e in suite if e.id in wanted])


# commands -----------------------------------------------------------------------


def _emit(lines: Sequence[str], out=None) -> None:
    out = out or sys.stdout
    for line in lines:
        print(line, file=out)


def _apply_overrides(cfg: Config, args) -> None:
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())


def _checkpoint(path: str):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {path}") from exc
    except FormatError as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_train(args) -> int:
    cfg = Config.load(args.config)
    _apply_overrides(cfg, args)
    if args.seed is not None:
        cfg.set("train.seed", args.seed)
    data = load_data(cfg, "train")
    model = model_spec(cfg, data)
    config = train_config(cfg, args.threads)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        def on_epoch(record):
            print(f"epoch={record.epoch} clean_acc={record.clean_acc:.6f} adv_loss={record.adv_loss:.6f} "
                  f"lr={record.lr:.6g}", flush=True)
            if log_fh:
                print(record.as_record(), file=log_fh, flush=True)

        try:
            params, _ = train(config, model, data, on_epoch=on_epoch)
        except NumericalError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(params, model, args.out)
    print(f"checkpoint={args.out} parameters={model.n_parameters()}")
    return EXIT_OK


def _eval_setup(args):
    cfg = Config.load(args.config)
    _apply_overrides(cfg, args)
    if args.seed is not None:
        cfg.set("eval.seed", args.seed)
    params, model = _checkpoint(args.checkpoint)
    data = load_data(cfg, "test")
    n = cfg.optional_int("eval.n")
    if n is not None:
        data = data.subset(n)
    return cfg, params, model, data


def cmd_attack(args) -> int:
    cfg, params, model, data = _eval_setup(args)
    suite = build_suite(cfg.__class__({**cfg.values, "eval.attacks": "all"}))
    if args.attack not in suite.ids():
        raise ConfigError(f"unknown attack id {args.attack!r}; known: {suite.ids()}")
    index = suite.ids().index(args.attack)
    entry = suite[index]
    x, y = data.inputs, data.labels
    outcome = run_attack(entry, model, params, x, y, eval_rngs(cfg.int("eval.seed"), index, range(len(x))))
    clean = predict_logits(model, params, x).argmax(axis=1) == y
    robust = clean & ~attack_success(entry, outcome, x)
    mean_norm = float(outcome.norms[:, entry.group.order].mean()) if len(x) else 0.0
    _emit([f"attack={entry.id} group={entry.group.value} epsilon={entry.epsilon:g} n={len(x)} "
           f"clean={clean.mean() if len(x) else 0.0:.6f} accuracy={robust.mean() if len(x) else 0.0:.6f} "
           f"mean_norm={mean_norm:.6f}"])
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, params, model, data = _eval_setup(args)
    report = evaluate(model, params, data, build_suite(cfg), seed=cfg.int("eval.seed"),
                      chunk=cfg.int("eval.chunk"), threads=args.threads)
    _emit(report.table().splitlines() if args.format == "table" else report.records())
    return EXIT_OK


def cmd_curve(args) -> int:
    cfg, params, model, data = _eval_setup(args)
    suite = build_suite(cfg)
    norm = NormKind.parse(args.norm)
    family = AttackSuite([e for e in suite if e.group is norm])
    grid_text = args.grid if args.grid is not None else cfg.get("eval.grid")
    try:
        grid = [float(v) for v in grid_text.split(",") if v.strip()]
        curve = robustness_curve(model, params, data, family, grid, seed=cfg.int("eval.seed"),
                                 chunk=cfg.int("eval.chunk"), threads=args.threads)
    except ValueError as exc:
        raise ConfigError(f"bad grid: {exc}") from exc
    _emit(["epsilon,accuracy"] + [f"{e:g},{a:.6f}" for e, a in curve])
    return EXIT_OK


def cmd_inspect_filters(args) -> int:
    params, _ = _checkpoint(args.checkpoint)
    try:
        report = filter_sparsity_report(params, args.threshold)
    except NotConvolutionalError as exc:
        raise ConfigError(str(exc)) from exc
    _emit(report.records())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unionrobust", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True, config=True):
        if checkpoint:
            p.add_argument("checkpoint")
        if config:
            p.add_argument("config", nargs="?", help="config file or preset name")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
            p.add_argument("--seed", type=int)
            p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p, checkpoint=False)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run one suite attack")
    common(p)
    p.add_argument("--attack", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="union worst-case evaluation")
    common(p)
    p.add_argument("--format", choices=("records", "table"), default="records")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curve", help="robustness curve as CSV")
    common(p)
    p.add_argument("--norm", required=True, choices=NORMS)
    p.add_argument("--grid", help="comma-separated increasing epsilons")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("inspect-filters", help="first-layer filter sparsity")
    common(p, config=False)
    p.add_argument("--threshold", type=float, default=10.0)
    p.set_defaults(func=cmd_inspect_filters)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
