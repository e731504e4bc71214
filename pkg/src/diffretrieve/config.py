"""Experiment configuration: one JSON document, five sections, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping

from .diffmath import InvalidArgument
from .losses import LossWeights
from .model import ModelConfig
from .retrieval import NOISE_MODES, RetrievalConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.00025
    beta1: float = 0.0
    beta2: float = 0.9
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidArgument("learning_rate must be nonnegative")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidArgument(f"{name} must lie in [0, 1)")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be positive")
        if self.epochs < 0:
            raise InvalidArgument("epochs must be nonnegative")
        if not self.eps > 0:
            raise InvalidArgument("eps must be positive")


@dataclass(frozen=True)
class BankConfig:
    """Synthetic clustered bank plus the graph task built on it."""

    clusters: int = 8
    d_feat: int = 16
    images: int = 256
    per_image: int = 6
    num_categories: int = 6
    sigma: float = 0.05
    image_spread: float = 0.5
    cluster_scale: float = 2.0
    category_spread: float = 1.0
    objects_per_graph: int = 3
    train_graphs: int = 64
    eval_graphs: int = 64
    prefilter_noise: float = 0.3

    def __post_init__(self):
        for name in ("clusters", "d_feat", "images", "per_image", "num_categories", "objects_per_graph"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"bank.{name} must be positive")
        if self.objects_per_graph > self.per_image:
            raise InvalidArgument("bank.objects_per_graph exceeds bank.per_image")
        if self.train_graphs < 0 or self.eval_graphs < 0:
            raise InvalidArgument("graph counts must be nonnegative")
        if self.train_graphs + self.eval_graphs >= self.images:
            raise InvalidArgument("held-out graph images would leave the bank empty")
        for name in ("sigma", "image_spread", "cluster_scale", "category_spread", "prefilter_noise"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"bank.{name} must be nonnegative")


@dataclass(frozen=True)
class OptimSection(OptimConfig):
    """Retrieval optimizer settings plus the co-occurrence pre-training schedule."""

    cooc_learning_rate: float = 0.001
    cooc_epochs: int = 30
    cooc_batch_size: int = 64

    def retrieval(self) -> OptimConfig:
        names = [f.name for f in dataclasses.fields(OptimConfig)]
        return OptimConfig(**{n: getattr(self, n) for n in names})

    def cooccurrence(self) -> OptimConfig:
        return dataclasses.replace(
            self.retrieval(),
            learning_rate=self.cooc_learning_rate,
            epochs=self.cooc_epochs,
            batch_size=self.cooc_batch_size,
        )


@dataclass(frozen=True)
class RetrievalSection:
    tau: float = 0.1
    eval_tau: float = 0.01
    k: int = 5
    noise: str = "gumbel"

    def __post_init__(self):
        if self.noise not in NOISE_MODES:
            raise InvalidArgument(f"retrieval.noise must be one of {NOISE_MODES}")
        self.training()
        self.evaluation()

    def training(self) -> RetrievalConfig:
        return RetrievalConfig(self.tau, self.k, "given-feature", self.noise)

    def evaluation(self) -> RetrievalConfig:
        return RetrievalConfig(self.eval_tau, self.k, "given-feature", "disabled")


@dataclass(frozen=True)
class ExperimentConfig:
    bank: BankConfig = field(default_factory=BankConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    optim: OptimSection = field(default_factory=OptimSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def with_overrides(self, **sections: Mapping[str, Any]) -> "ExperimentConfig":
        """Copy with selected fields replaced, e.g. ``optim={"seed": 3}``."""
        merged = self.to_dict()
        for name, values in sections.items():
            if name not in merged:
                raise ConfigError(f"unknown section {name!r}")
            merged[name].update(values)
        return config_from_dict(merged)


def _build(cls, data: Any, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{where}.{name}" if where else name)
        elif hint in (int, float) and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{where}.{name}: expected a number")
        elif hint is int and isinstance(value, float):
            raise ConfigError(f"{where}.{name}: expected an integer")
        elif hint is str and not isinstance(value, str):
            raise ConfigError(f"{where}.{name}: expected a string")
        else:
            kwargs[name] = float(value) if hint is float else value
    try:
        return cls(**kwargs)
    except InvalidArgument as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(data)
