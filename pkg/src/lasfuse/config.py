"""Experiment configuration: a YAML tree checked against nested dataclasses.

Unknown keys and wrongly typed values raise :class:`ConfigError` naming the
full key path (``train.lr``).  Missing keys take the defaults below, which
follow the usual recipe (label smoothing 0.1, sampling 0.9, dropout 0.1,
Adam at 0.001, 5 length buckets, beam 10) scaled down to desk size.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

LAMBDA_GRID = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25]
INSERTION_GRID = [round(0.1 * i, 1) for i in range(10)]
COVERAGE_GRID = [0.0, 0.01, 0.02, 0.03, 0.04, 0.05]


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path or '<root>'}: {msg}")
        self.path = path


@dataclass
class CorpusSection:
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    n_text: int = 30000
    n_lm_dev: int = 1000
    vocab_size: int = 80
    frames_per_token: int = 4
    feat_dim: int = 16
    noise: float = 1.5
    group_size: int = 3
    group_spread: float = 0.25
    dedup_threshold: int = 300


@dataclass
class ModelSection:
    enc_layers: int = 3
    enc_units: int = 32
    dec_units: int = 64
    emb_dim: int = 32
    att_dim: int = 32
    dropout: float = 0.1


@dataclass
class LmSection:
    emb_dim: int = 64
    units: int = 128
    proj_dim: int = 64
    dropout: float = 0.1
    epochs: int = 3
    lr: float = 0.003
    batch_size: int = 64
    patience: int = 2


def _second_lm() -> LmSection:
    return LmSection(emb_dim=64, units=256, proj_dim=64, epochs=4)


@dataclass
class TrainSection:
    lr: float = 0.005
    early_epochs: int = 12
    early_hold: int = 7
    late_epochs: int = 8
    late_hold: int = 4
    late_lr: float = 0.001
    smoothing: float = 0.1
    sampling_prob: float = 0.9
    n_buckets: int = 5
    batch_sizes: list = field(default_factory=lambda: [32, 24, 16, 12, 8])
    lm_task_prob: float = 0.25


@dataclass
class DecodeSection:
    beam: int = 10
    tune_beam: int = 10
    max_len: int = 40
    lm_weights: list = field(default_factory=lambda: list(LAMBDA_GRID))
    insertion_rewards: list = field(default_factory=lambda: list(INSERTION_GRID))
    coverage_weights: list = field(default_factory=lambda: list(COVERAGE_GRID))
    rescore_weights: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])


@dataclass
class ExperimentConfig:
    seed: int = 0
    modes: list = field(default_factory=lambda: ["none", "shallow", "deep", "cold", "lower_layer", "multitask"])
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    lm: LmSection = field(default_factory=LmSection)
    second_lm: LmSection = field(default_factory=_second_lm)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return config_hash(self.to_dict())


def config_hash(tree: dict) -> str:
    return hashlib.sha256(json.dumps(tree, sort_keys=True).encode()).hexdigest()


def _check_scalar(value, typ, path):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return list(value)
    raise ConfigError(path, f"unsupported field type {typ}")


def _build(cls, tree, path: str):
    if not isinstance(tree, dict):
        raise ConfigError(path, f"expected a mapping, got {type(tree).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in tree:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else str(key), "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in tree:
            continue
        sub = f"{path}.{f.name}" if path else f.name
        typ = hints[f.name]
        if dataclasses.is_dataclass(typ):
            kwargs[f.name] = _build(typ, tree[f.name], sub)
        else:
            kwargs[f.name] = _check_scalar(tree[f.name], typ, sub)
    return cls(**kwargs)


def _validate(cfg: ExperimentConfig) -> None:
    from .fusion import MODES

    for i, m in enumerate(cfg.modes):
        if m not in MODES:
            raise ConfigError(f"modes[{i}]", f"unknown mode {m!r}; expected one of {MODES}")
    c, t, d = cfg.corpus, cfg.train, cfg.decode
    positive = {
        "corpus.n_train": c.n_train, "corpus.n_dev": c.n_dev, "corpus.n_test": c.n_test,
        "corpus.n_text": c.n_text, "corpus.frames_per_token": c.frames_per_token,
        "corpus.dedup_threshold": c.dedup_threshold, "corpus.group_size": c.group_size,
        "model.enc_layers": cfg.model.enc_layers, "train.early_epochs": t.early_epochs,
        "train.late_epochs": t.late_epochs, "train.n_buckets": t.n_buckets,
        "decode.beam": d.beam, "decode.tune_beam": d.tune_beam, "decode.max_len": d.max_len,
    }
    for key, v in positive.items():
        if v < 1:
            raise ConfigError(key, "must be >= 1")
    if c.noise < 0:
        raise ConfigError("corpus.noise", "must be >= 0")
    if not 0 <= t.smoothing < 1:
        raise ConfigError("train.smoothing", "must be in [0, 1)")
    if not 0 <= t.sampling_prob <= 1:
        raise ConfigError("train.sampling_prob", "must be in [0, 1]")
    if len(t.batch_sizes) != t.n_buckets:
        raise ConfigError("train.batch_sizes", f"need one size per bucket ({t.n_buckets})")
    for name in ("lm_weights", "insertion_rewards", "coverage_weights", "rescore_weights"):
        grid = getattr(d, name)
        if not grid or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in grid):
            raise ConfigError(f"decode.{name}", "must be a non-empty list of numbers")
    if min(d.lm_weights) < 0:
        raise ConfigError("decode.lm_weights", "weights must be >= 0")


def from_dict(tree: dict | None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, tree or {}, "")
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        tree = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path}: not valid YAML ({exc})") from exc
    return from_dict(tree)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
