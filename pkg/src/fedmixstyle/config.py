"""Flat ``section.key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected and
missing keys keep their defaults. ``FEDMIX_SEED`` in the environment
overrides ``sim.seed``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .adapt import AdaptConfig, MixStyleConfig
from .data import DataConfig
from .errors import ConfigError, FedMixError
from .model import TrainConfig


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit_open_right(x):
    return 0 <= x < 1


def _unit(x):
    return 0 <= x <= 1


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default, range check or None)
KEYS = {
    "sim.seed": (int, 42, _nonneg),
    "sim.out_dir": (str, "out", None),
    "model.temperature": (float, 1.0, _pos),
    "train.lr": (float, 0.05, _pos),
    "train.momentum": (float, 0.9, _unit_open_right),
    "train.steps": (int, 1500, _nonneg),
    "train.batch_size": (int, 32, _pos),
    "train.bn_momentum": (float, 0.1, lambda x: 0 < x <= 1),
    "adapt.steps": (int, 100, _nonneg),
    "adapt.lr": (float, 0.01, _pos),
    "adapt.momentum": (float, 0.9, _unit_open_right),
    "adapt.batch_size": (int, 16, _pos),
    "adapt.init_weight": (float, 0.1, _unit),
    "mixstyle.enabled": (_bool, True, None),
    "mixstyle.p": (float, 0.5, _unit),
    "mixstyle.alpha": (float, 0.3, _pos),
    "data.classes": (int, 5, lambda x: x >= 2),
    "data.side": (int, 16, lambda x: x >= 4),
    "data.n_train": (int, 4000, _pos),
    "data.n_test": (int, 1000, _pos),
    "data.grid": (int, 4, lambda x: x >= 2),
    "data.noise_std": (float, 0.3, _nonneg),
    "data.k_shot": (int, 5, _pos),
    "data.q_query": (int, 20, _pos),
    "data.pool_per_class": (int, 50, _pos),
    "data.gain_min": (float, 0.4, lambda x: 0.2 <= x <= 2.5),
    "data.gain_max": (float, 1.8, lambda x: 0.2 <= x <= 2.5),
    "data.bias_min": (float, -0.8, lambda x: -1 <= x <= 1),
    "data.bias_max": (float, 0.8, lambda x: -1 <= x <= 1),
    "fed.rounds": (int, 3, lambda x: x >= 1),
    "fed.clients": (int, 4, lambda x: x >= 1),
    "fed.transport": (str, "inproc", lambda x: x in ("inproc", "loopback")),
}


@dataclass(frozen=True)
class SimConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    data: DataConfig = field(default_factory=DataConfig)
    rounds: int = 3
    clients: int = 4
    transport: str = "inproc"
    out_dir: str = "out"
    seed: int = 42
    temperature: float = 1.0


def build_config(values: dict) -> SimConfig:
    v = {k: spec[1] for k, spec in KEYS.items()}
    v.update(values)
    seed = v["sim.seed"]
    try:
        return SimConfig(
            train=TrainConfig(v["train.lr"], v["train.momentum"], v["train.steps"], v["train.batch_size"],
                              v["train.bn_momentum"], seed),
            adapt=AdaptConfig(
                v["adapt.steps"], v["adapt.lr"], v["adapt.momentum"], v["adapt.batch_size"],
                MixStyleConfig(v["mixstyle.p"], v["mixstyle.alpha"], v["mixstyle.enabled"]),
                v["adapt.init_weight"],
            ),
            data=DataConfig(
                n_classes=v["data.classes"], side=v["data.side"], n_train=v["data.n_train"],
                n_test=v["data.n_test"], grid=v["data.grid"], noise_std=v["data.noise_std"],
                k_shot=v["data.k_shot"], q_query=v["data.q_query"], pool_per_class=v["data.pool_per_class"],
                gain_range=(v["data.gain_min"], v["data.gain_max"]),
                bias_range=(v["data.bias_min"], v["data.bias_max"]), seed=seed,
            ),
            rounds=v["fed.rounds"],
            clients=v["fed.clients"],
            transport=v["fed.transport"],
            out_dir=v["sim.out_dir"],
            seed=seed,
            temperature=v["model.temperature"],
        )
    except FedMixError as e:
        raise ConfigError(str(e)) from e


def parse_config(text: str, env: dict | None = None) -> SimConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'section.key = value'", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", line=lineno, key=key)
        if not value:
            raise ConfigError(f"missing value for {key}", line=lineno, key=key)
        parser, _, check = KEYS[key]
        try:
            parsed = parser(value)
        except ValueError as e:
            raise ConfigError(f"cannot parse {key}: {e}", line=lineno, key=key) from e
        if check is not None and not check(parsed):
            raise ConfigError(f"{key} = {value} is out of range", line=lineno, key=key)
        values[key] = parsed
    env = os.environ if env is None else env
    if env.get("FEDMIX_SEED"):
        try:
            seed = int(env["FEDMIX_SEED"])
        except ValueError as e:
            raise ConfigError(f"FEDMIX_SEED is not an integer: {env['FEDMIX_SEED']!r}", key="sim.seed") from e
        if seed < 0:
            raise ConfigError("FEDMIX_SEED must be non-negative", key="sim.seed")
        values["sim.seed"] = seed
    return build_config(values)


def load_config(path, env: dict | None = None) -> SimConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), env)
