"""Run configuration: a sectioned ``key = value`` text file.

Every key has a default; the type of the default decides how a value is
parsed. Floats also accept fractions such as ``4/255``. Unknown sections or
keys are rejected. The canonical text (fixed section order, sorted keys,
``repr`` values) is what gets hashed and snapshotted.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
from fractions import Fraction
from pathlib import Path

from .attacks import AttackConfig
from .errors import ConfigError
from .evalharness import DEFAULT_TARGETS, TargetSpec
from .losses import LossConfig
from .pretrain import PretrainConfig
from .toyvlm import ArchConfig, DecodeConfig
from .trainer import TrainConfig

SECTION_ORDER = ("model", "data", "pretrain", "attack", "loss", "train", "eval", "ablate", "io")

DEFAULTS: dict[str, dict[str, object]] = {
    "model": {**ArchConfig().to_dict(), "init_seed": 0},
    "data": {"seed": 0, "n_train": 256, "n_eval": 100},
    "pretrain": {
        "learning_rate": 1e-3,
        "weight_decay": 0.01,
        "batch_size": 32,
        "min_steps": 1200,
        "max_steps": 6000,
        "eval_every": 200,
        "gate": 0.9,
        "n_gate_eval": 64,
        "grad_clip": 1.0,
        "seed": 0,
        "decoder": "small",
    },
    "attack": {
        "kind": "caption-nll-untargeted",
        "eps": 8 / 255,
        "steps": 100,
        "kappa": 0.0,
        "threshold": 0.0,
        "check_every": 50,
        "seed": 0,
    },
    "loss": {"variant": "dpo", "ipo_tau": 0.5, "simpo_gamma": 0.5},
    "train": {
        "epsilon": 4 / 255,
        "pgd_steps": 10,
        "pgd_init": "random",
        "beta": 0.1,
        "lambda": 1.0,
        "learning_rate": 1e-3,
        "weight_decay": 1e-4,
        "batch_size": 16,
        "epochs": 2,
        "objective": "adpo",
        "grad_clip": 1.0,
        "seed": 0,
        "checkpoint_every": 0,
    },
    "eval": {
        "n_eval": 100,
        "targets": ";".join(DEFAULT_TARGETS),
        "n_target_images": 20,
        "targeted_steps": 1000,
        "asr": False,
        "batch_size": 100,
        "decode_max_len": 16,
    },
    "ablate": {
        "kind": "lambda-sweep",
        "grid": "0,0.5,1,2",
        "n_eval": 100,
    },
    "io": {
        "base_checkpoint": "",
        "large_checkpoint": "",
        "robust_checkpoint": "",
        "checkpoint": "",
        "deterministic": False,
    },
}


def _parse(raw: str, default: object, key: str) -> object:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(Fraction(raw)) if "/" in raw else float(raw)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"invalid value {raw!r} for {key}") from None
    return raw


def _format(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Typed view over the sectioned configuration."""

    def __init__(self, values: dict[str, dict[str, object]] | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, items in (values or {}).items():
            for key, value in items.items():
                self._assign(section, key, value)

    # -- construction ------------------------------------------------------

    def _assign(self, section: str, key: str, value: object) -> None:
        dotted = f"{section}.{key}"
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r} (in key {dotted!r})")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        default = DEFAULTS[section][key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse(value, default, dotted)
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif type(value) is not type(default):
            raise ConfigError(f"{dotted} expects {type(default).__name__}, got {value!r}")
        self.values[section][key] = value

    def set(self, dotted: str, value: object) -> None:
        if "." not in dotted:
            raise ConfigError(f"config key {dotted!r} must be of the form section.key")
        section, key = dotted.split(".", 1)
        self._assign(section, key, value)

    def get(self, dotted: str) -> object:
        section, key = dotted.split(".", 1)
        try:
            return self.values[section][key]
        except KeyError:
            raise ConfigError(f"unknown config key {dotted!r}") from None

    def apply_overrides(self, overrides) -> None:
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like key=value")
            key, value = item.split("=", 1)
            self.set(key.strip(), value)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                           inline_comment_prefixes=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}") from None
        cfg = cls()
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg._assign(section, key, value)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    # -- serialisation -----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for section in SECTION_ORDER:
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                lines.append(f"{key} = {_format(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values

    def set_seed(self, seed: int) -> None:
        for key in ("model.init_seed", "data.seed", "pretrain.seed", "attack.seed", "train.seed"):
            self.set(key, seed)

    # -- typed views -------------------------------------------------------

    def arch(self) -> ArchConfig:
        d = dict(self.values["model"])
        d.pop("init_seed")
        return ArchConfig.from_dict(d)

    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(**self.values["pretrain"])

    def train(self) -> TrainConfig:
        t = dict(self.values["train"])
        t["lam"] = t.pop("lambda")
        loss = self.values["loss"]
        return TrainConfig(**t, variant=loss["variant"], ipo_tau=loss["ipo_tau"], simpo_gamma=loss["simpo_gamma"])

    def loss(self) -> LossConfig:
        return self.train().loss_config()

    def attack(self, kind: str | None = None) -> AttackConfig:
        a = self.values["attack"]
        return AttackConfig(
            epsilon=a["eps"], steps=a["steps"], objective=kind or a["kind"], seed=a["seed"],
            kappa=a["kappa"], check_every=a["check_every"],
        )

    def decode(self) -> DecodeConfig:
        return DecodeConfig(max_len=self.values["eval"]["decode_max_len"])

    def targets(self) -> list[TargetSpec]:
        n = self.values["eval"]["n_target_images"]
        return [TargetSpec(t.strip(), n) for t in str(self.values["eval"]["targets"]).split(";") if t.strip()]

    def ablation_grid(self) -> list:
        items = [g.strip() for g in str(self.values["ablate"]["grid"]).split(",") if g.strip()]
        out = []
        for g in items:
            try:
                out.append(float(Fraction(g)))
            except ValueError:
                out.append(g)
        return out
