"""Run configuration: one JSON document, strict keys, content-hashed for lineage.

Defaults follow the reference training recipe (AdamW, initial lr 1e-4 decayed
by 0.999^(1/8) per epoch, batch size 16); step budgets are desk-scale and
overridable. An epoch is one full pass over the synthetic corpus.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .features import SyntheticCorpusSpec


@dataclass
class CorpusConfig:
    n_utterances: int = 200
    feature_dim: int = 32
    frame_rate_hz: int = 50
    frames_per_char: int = 10
    min_text_len: int = 4
    max_text_len: int = 12
    vocabulary: str = "abcdefghijklmnopqrstuvwxyz "
    n_speakers: int = 4
    noise_scale: float = 0.05
    seed: int = 0
    generator: str = "char-basis"

    def to_spec(self) -> SyntheticCorpusSpec:
        return SyntheticCorpusSpec(
            n_utterances=self.n_utterances,
            feature_dim=self.feature_dim,
            frame_rate_hz=self.frame_rate_hz,
            frames_per_char=self.frames_per_char,
            min_text_len=self.min_text_len,
            max_text_len=self.max_text_len,
            vocabulary=self.vocabulary,
            n_speakers=self.n_speakers,
            noise_scale=self.noise_scale,
            seed=self.seed,
            generator=self.generator,
        )


@dataclass
class BridgeConfig:
    groups: int = 3
    levels: int = 3
    codebook_size: int = 64
    ema_decay: float = 0.99
    dead_code_threshold: float = 1e-3
    commitment_weight: float = 0.0  # extra encoder-pull term, off by default
    predictor_embed: int = 32
    predictor_hidden: int = 64
    seed: int = 1


@dataclass
class ArConfig:
    layers: int = 4
    heads: int = 4
    width: int = 128
    context: int = 512
    input_mode: str = "groups"  # groups | tokens (tokens = no-bridge ablation)
    feature_loss: bool = True
    seed: int = 2


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay_per_epoch: float = 0.999 ** (1.0 / 8.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 16
    bridge_steps: int = 20000
    ar_steps: int = 10000
    eval_every: int = 500
    checkpoint_every: int = 1000
    seed: int = 3


@dataclass
class Config:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    ar: ArConfig = field(default_factory=ArConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


_SECTIONS = {"corpus": CorpusConfig, "bridge": BridgeConfig, "ar": ArConfig, "train": TrainConfig}


def _build_section(cls, data: dict, path: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in config section {path!r}")
    return cls(**data)


def config_from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level config key(s) {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        part = data.get(name, {})
        if not isinstance(part, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        sections[name] = _build_section(cls, part, name)
    return Config(**sections)


def load_config(path) -> Config:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(data)
