"""Experiment configuration: sectioned key-value text, strictly validated.

Unknown sections or keys are rejected so typos cannot silently fall back to
defaults.  See README for a full annotated example.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace
from pathlib import Path

ALL_MODES = ("ml", "pkm", "mlwkm", "fl", "flwkm")

_SCHEMA = {
    "data": {
        "source", "classes", "features", "per_class", "separation",
        "path", "images", "labels",
        "fraction", "classes_per_client", "imbalance", "test_fraction", "km_fraction",
    },
    "model": {"hidden"},
    "federation": {
        "clients", "rounds", "epochs", "batch_size", "learning_rate", "sampling_rate",
    },
    "knowledge": {
        "lambda", "quantizer_features", "quantizer_buckets",
        "pkm_features", "pkm_epochs", "pkm_learning_rate",
    },
    "run": {"seed", "modes", "output_dir", "threads"},
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    # data
    source: str = "synth"
    classes: int = 7
    features: int = 10
    per_class: int = 600
    separation: float = 2.0
    path: str = ""
    images: str = ""
    labels: str = ""
    fraction: float = 1.0
    classes_per_client: int = 5
    imbalance: float = 0.7
    test_fraction: float = 0.2
    km_fraction: float = 0.2
    # model
    hidden: tuple[int, ...] = (64, 64)
    # federation
    clients: int = 5
    rounds: int = 30
    epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 0.5
    sampling_rate: float = 1.0
    # knowledge
    lam: tuple[float, ...] | float = 0.3
    quantizer_features: int = 3
    quantizer_buckets: int = 4
    pkm_features: int = 5
    pkm_epochs: int = 500
    pkm_learning_rate: float = 1.0
    # run
    seed: int = 0
    modes: tuple[str, ...] = ALL_MODES
    output_dir: str = "out"
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.source not in ("synth", "libsvm", "idx"):
            raise ConfigError(f"data.source must be synth|libsvm|idx, got {self.source!r}")
        if self.source == "libsvm" and not self.path:
            raise ConfigError("data.path is required for source=libsvm")
        if self.source == "idx" and not (self.images and self.labels):
            raise ConfigError("data.images and data.labels are required for source=idx")
        checks = [
            (self.classes >= 2, "data.classes >= 2"),
            (self.features >= 1, "data.features >= 1"),
            (self.per_class >= 1, "data.per_class >= 1"),
            (self.separation > 0, "data.separation > 0"),
            (0 < self.fraction <= 1, "data.fraction in (0, 1]"),
            (self.classes_per_client >= 1, "data.classes_per_client >= 1"),
            (0 < self.imbalance <= 1, "data.imbalance in (0, 1]"),
            (0 < self.test_fraction < 1, "data.test_fraction in (0, 1)"),
            (0 < self.km_fraction < 1, "data.km_fraction in (0, 1)"),
            (all(h >= 1 for h in self.hidden), "model.hidden sizes >= 1"),
            (self.clients >= 1, "federation.clients >= 1"),
            (self.rounds >= 0, "federation.rounds >= 0"),
            (self.epochs >= 0, "federation.epochs >= 0"),
            (self.batch_size >= 1, "federation.batch_size >= 1"),
            (self.learning_rate >= 0, "federation.learning_rate >= 0"),
            (0 < self.sampling_rate <= 1, "federation.sampling_rate in (0, 1]"),
            (self.quantizer_features >= 1, "knowledge.quantizer_features >= 1"),
            (self.quantizer_buckets >= 1, "knowledge.quantizer_buckets >= 1"),
            (self.pkm_features >= 1, "knowledge.pkm_features >= 1"),
            (self.pkm_epochs >= 1, "knowledge.pkm_epochs >= 1"),
            (self.pkm_learning_rate > 0, "knowledge.pkm_learning_rate > 0"),
            (self.threads >= 1, "run.threads >= 1"),
        ]
        for ok, what in checks:
            if not ok:
                raise ConfigError(f"config violates {what}")
        for lam in self.lam_per_client():
            if not 0.0 <= lam <= 1.0:
                raise ConfigError(f"knowledge.lambda value {lam} outside [0, 1]")
        for mode in self.modes:
            if mode not in ALL_MODES:
                raise ConfigError(f"run.modes contains unknown mode {mode!r}")

    def lam_per_client(self) -> tuple[float, ...]:
        if isinstance(self.lam, tuple):
            if len(self.lam) != self.clients:
                raise ConfigError(
                    f"knowledge.lambda lists {len(self.lam)} values for {self.clients} clients"
                )
            return self.lam
        return (float(self.lam),) * self.clients

    def with_overrides(self, seed=None, output_dir=None, threads=None, lam=None, fraction=None):
        kwargs = {}
        if seed is not None:
            kwargs["seed"] = int(seed)
        if output_dir is not None:
            kwargs["output_dir"] = str(output_dir)
        if threads is not None:
            kwargs["threads"] = int(threads)
        if lam is not None:
            kwargs["lam"] = lam
        if fraction is not None:
            kwargs["fraction"] = float(fraction)
        return replace(self, **kwargs)


def _convert(section: str, key: str, raw: str):
    raw = raw.strip()
    try:
        if key in {"hidden"}:
            return tuple(int(tok) for tok in raw.split(",") if tok.strip())
        if key in {"modes"}:
            return tuple(tok.strip() for tok in raw.split(",") if tok.strip())
        if key in {"lambda"}:
            vals = [float(tok) for tok in raw.split(",") if tok.strip()]
            return vals[0] if len(vals) == 1 else tuple(vals)
        if key in {
            "classes", "features", "per_class", "classes_per_client",
            "clients", "rounds", "epochs", "batch_size",
            "quantizer_features", "quantizer_buckets", "pkm_features", "pkm_epochs",
            "seed", "threads",
        }:
            return int(raw)
        if key in {
            "separation", "fraction", "imbalance", "test_fraction", "km_fraction",
            "learning_rate", "sampling_rate", "pkm_learning_rate",
        }:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse value {raw!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    kwargs = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            field_name = "lam" if key == "lambda" else key
            kwargs[field_name] = _convert(section, key, raw)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))
