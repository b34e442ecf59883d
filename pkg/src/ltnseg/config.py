"""Flat ``key = value`` run configuration, merged with command-line overrides.

Lines starting with ``#`` are comments. Tuples are written comma-separated
(``fractions = 1.0,0.25,0.05``) and ``none`` clears an optional value.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ltnseg.constraints import ConstraintParams
from ltnseg.data import PhantomConfig
from ltnseg.experiment import ExperimentConfig
from ltnseg.model import SegModelConfig
from ltnseg.trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    n: int = 200
    size: tuple = (32, 32)
    noise_std: float = 0.1
    # split and schedule
    k: int = 5
    fraction: float = 1.0
    fractions: tuple = (1.0, 0.25, 0.05)
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 4
    warmup_fraction: float = 0.1
    mode: str = "ltn"
    # logic
    agg_p: float = 2.0
    quantifier_p: float = 2.0
    gamma_c: float = 0.001
    gamma_v: float = 1e-5
    epsilon: float | None = None
    epsilon_fraction: float = 0.019
    chamfer_power: float = 1.0
    nest_pairs: int = 32
    nest_points: int = 64
    nest_endpoint_weights: bool = True
    # model
    width: int = 8
    depth: int = 2
    # paths
    data: str | None = None
    out: str | None = None

    def __post_init__(self):
        self.train_config()  # surfaces invalid values before any compute

    def constraint_params(self):
        return ConstraintParams(gamma_c=self.gamma_c, gamma_v=self.gamma_v, epsilon=self.epsilon,
                                epsilon_fraction=self.epsilon_fraction, chamfer_power=self.chamfer_power,
                                nest_pairs=self.nest_pairs, nest_points=self.nest_points,
                                nest_endpoint_weights=self.nest_endpoint_weights, seed=self.seed)

    def train_config(self):
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                           warmup_fraction=self.warmup_fraction, agg_p=self.agg_p,
                           quantifier_p=self.quantifier_p, mode=self.mode, seed=self.seed,
                           constraints=self.constraint_params(),
                           model=SegModelConfig(width=self.width, depth=self.depth))

    def phantom_config(self):
        return PhantomConfig(size=self.size, noise_std=self.noise_std)

    def experiment_config(self):
        return ExperimentConfig(n_samples=self.n, size=self.size, k=self.k, seeds=self.seeds,
                                fractions=self.fractions, train=self.train_config(),
                                phantom=self.phantom_config())

    def to_text(self):
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


_FIELD_TYPES = {
    "n": int, "size": (int,), "noise_std": float, "k": int, "fraction": float,
    "fractions": (float,), "seed": int, "seeds": (int,), "epochs": int, "lr": float, "batch_size": int,
    "warmup_fraction": float, "mode": str, "agg_p": float, "quantifier_p": float, "gamma_c": float,
    "gamma_v": float, "epsilon": float, "epsilon_fraction": float, "chamfer_power": float,
    "nest_pairs": int, "nest_points": int, "nest_endpoint_weights": bool, "width": int, "depth": int,
    "data": str, "out": str,
}
OPTIONAL = {"epsilon", "data", "out"}


def parse_value(key, text):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    text = text.strip()
    kind = _FIELD_TYPES[key]
    if text.lower() == "none":
        if key not in OPTIONAL:
            raise ConfigError(f"{key} cannot be none")
        return None
    try:
        if isinstance(kind, tuple):
            return tuple(kind[0](part) for part in text.split(",") if part.strip())
        if kind is bool:
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = parse_value(key, raw)
    return values


def load_run_config(path=None, overrides=None):
    """File values first, then ``overrides`` (already-typed or raw strings) on top."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    for key, value in (overrides or {}).items():
        values[key] = parse_value(key, value) if isinstance(value, str) and _FIELD_TYPES.get(key) is not str \
            else value
    try:
        return dataclasses.replace(RunConfig(), **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
