"""Flat, typed ``section.key = value`` run configuration.

Every known key has a type and a default; the resolved configuration (all
keys, sorted) is what gets snapshotted next to each run so that the snapshot
alone reproduces it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .analysis import AttackConfig, default_epsilons
from .data import AugmentationConfig
from .errors import ConfigError
from .models import (ACTIVATIONS, ARCH_FAMILIES, LAYER_KINDS, NORMALIZATIONS, POOLINGS,
                     LayerVariantConfig)
from .train import TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(item: Callable[[str], Any]) -> Callable[[str], list]:
    def parse(text: str) -> list:
        body = text.strip()
        if body.startswith("[") and body.endswith("]"):
            body = body[1:-1]
        return [item(tok.strip()) for tok in body.split(",") if tok.strip()]
    parse.__name__ = f"list[{item.__name__}]"
    return parse


def _enum(*allowed: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = text.strip()
        if value not in allowed:
            raise ValueError(f"{value!r} not in {allowed}")
        return value
    parse.__name__ = "enum"
    return parse


def _enum_list(*allowed: str):
    return _list(_enum(*allowed))


def _str(text: str) -> str:
    return text.strip().strip('"')


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    "model.arch_family": (_enum(*ARCH_FAMILIES), "rohrer_100k"),
    "model.p_mode": (_str, "learned"),
    "model.dtype": (_enum("float64", "float32"), "float64"),
    "grid.layer_kind": (_enum_list(*LAYER_KINDS), ["conv", "scs"]),
    "grid.activation": (_enum_list(*ACTIVATIONS), ["relu", "none"]),
    "grid.pooling": (_enum_list(*POOLINGS), ["maxpool"]),
    "grid.normalization": (_enum_list(*NORMALIZATIONS), ["none"]),
    "grid.seeds": (_list(int), []),
    "data.dir": (_str, ""),
    "data.train_size": (int, 4000),
    "data.test_size": (int, 1000),
    "data.stratified": (_bool, True),
    "data.seed": (int, 0),
    "data.standardize": (_bool, False),
    "data.augment": (_bool, True),
    "data.crop_pad": (int, 4),
    "data.flip_prob": (float, 0.5),
    "train.epochs": (int, 30),
    "train.batch_size": (int, 128),
    "train.max_lr": (float, 0.01),
    "train.pct_start": (float, 0.3),
    "train.div_factor": (float, 25.0),
    "train.final_div_factor": (float, 1e4),
    "train.weight_decay": (float, 0.0),
    "train.record_times": (_bool, True),
    "attack.epsilons": (_list(float), default_epsilons()),
    "attack.steps": (int, 10),
    "attack.step_scale": (float, 2.5),
    "attack.random_start": (_bool, False),
    "attack.n_eval": (int, 1000),
    "saliency.reduction": (_enum("max", "mean"), "max"),
    "demo.sigma": (float, 0.0),
    "demo.seed": (int, 0),
}


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}", key=key)
    parser, _ = SCHEMA[key]
    try:
        return parser(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}", key=key) from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    return str(value)


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'", key=line)
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = parse_value(key, value)
    return values


@dataclass
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
        values = {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in SCHEMA.items()}
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            values.update(parse_text(text, str(path)))
        cfg = cls(values)
        for item in overrides:
            cfg.override(item)
        return cfg

    def override(self, item: str) -> None:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", key=item)
        key, text = (part.strip() for part in item.split("=", 1))
        self.values[key] = parse_value(key, text)

    def __getitem__(self, key: str):
        return self.values[key]

    def __setitem__(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        self.values[key] = value

    def snapshot(self) -> str:
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in sorted(self.values))

    # -- typed views -------------------------------------------------------------
    def seeds(self) -> list[int]:
        return self["grid.seeds"] or [self["seed"]]

    def variants(self) -> list[LayerVariantConfig]:
        cells = []
        for seed in self.seeds():
            for kind in self["grid.layer_kind"]:
                for act in self["grid.activation"]:
                    for pool in self["grid.pooling"]:
                        for norm in self["grid.normalization"]:
                            try:
                                cells.append(LayerVariantConfig(
                                    kind, act, pool, norm, self["model.p_mode"],
                                    self["model.arch_family"], seed))
                            except ConfigError as exc:
                                raise ConfigError(str(exc), key=f"model.{exc.key}") from None
        return cells

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"], batch_size=self["train.batch_size"],
            max_lr=self["train.max_lr"], pct_start=self["train.pct_start"],
            div_factor=self["train.div_factor"], final_div_factor=self["train.final_div_factor"],
            weight_decay=self["train.weight_decay"],
            augment=AugmentationConfig(self["data.augment"], self["data.crop_pad"],
                                       self["data.flip_prob"]),
            seed=self["seed"], record_times=self["train.record_times"])

    def attack_config(self) -> AttackConfig:
        try:
            return AttackConfig(list(self["attack.epsilons"]), self["attack.steps"],
                                self["attack.step_scale"], self["attack.random_start"])
        except ValueError as exc:
            raise ConfigError(str(exc), key="attack") from None
