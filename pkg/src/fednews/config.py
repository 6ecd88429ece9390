"""Run and model configuration.

Defaults are the full-scale settings: NAdam at lr 6e-5, batch 256,
400-d news representations, 50 long-term / 20 short-term clicks, 30-word titles,
20 negatives per click.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 400
    heads: int = 8
    word_dim: int = 300
    text_layers: int = 1
    d_img: int = 64
    query_dim: int = 200
    vocab_size: int = 2
    max_title_len: int = 30
    n_long: int = 50
    short_window: int = 20
    user_heads: int | None = None
    modalities: str = "both"   # both | text | image
    interests: str = "both"    # both | long | short
    activation: str = "tanh"

    def validate(self) -> None:
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d % self.n_user_heads:
            raise ConfigError(f"d={self.d} is not divisible by user_heads={self.n_user_heads}")
        if self.modalities not in ("both", "text", "image"):
            raise ConfigError(f"unknown modalities {self.modalities!r}")
        if self.interests not in ("both", "long", "short"):
            raise ConfigError(f"unknown interests {self.interests!r}")
        for name in ("d", "word_dim", "text_layers", "d_img", "query_dim", "max_title_len",
                     "n_long", "short_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must cover pad and OOV ids")

    @property
    def n_user_heads(self) -> int:
        return self.user_heads or self.heads


@dataclass
class TrainConfig:
    lr: float = 6e-5
    batch_size: int = 256
    negatives: int = 20
    group_size: int = 200
    max_rounds: int = 100
    clip_delta: float | None = 1.0
    frac_bits: int = 24
    eval_interval: int = 10
    patience: int = 0          # evaluations without improvement before stopping; 0 disables
    tol: float = 1e-4
    catalog_refresh: int = 10
    retry_budget: int = 3
    dropout_prob: float = 0.0  # simulated per-client dropout per attempt
    eval_split: str = "test"


@dataclass
class RunConfig:
    mode: str = "federated"    # federated | centralized
    data_dir: str | None = None
    synthetic: dict | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 1
    reverse_history: bool = False

    def validate(self) -> None:
        if self.mode not in ("federated", "centralized"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.data_dir is None and self.synthetic is None:
            raise ConfigError("config needs data_dir or synthetic")
        self.model.validate()
        t = self.train
        if t.lr < 0 or t.batch_size < 1 or t.negatives < 1 or t.max_rounds < 0:
            raise ConfigError("lr, batch_size, negatives, max_rounds out of range")
        if t.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if t.clip_delta is not None and t.clip_delta <= 0:
            raise ConfigError("clip_delta must be positive or null")
        if not 0 <= t.frac_bits <= 40:
            raise ConfigError("frac_bits must lie in [0, 40]")
        if not 0 <= t.dropout_prob <= 1 or t.retry_budget < 0:
            raise ConfigError("dropout_prob must lie in [0, 1] and retry_budget be >= 0")
        if t.eval_interval < 1 or t.catalog_refresh < 1:
            raise ConfigError("eval_interval and catalog_refresh must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, raw: dict):
    known = {f.name for f in fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    return cls(**raw)


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    try:
        model = _build(ModelConfig, raw.pop("model", {}) or {})
        train = _build(TrainConfig, raw.pop("train", {}) or {})
        cfg = _build(RunConfig, raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.model, cfg.train = model, train
    env_seed = os.environ.get("FEDNEWS_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"FEDNEWS_SEED must be an integer, got {env_seed!r}") from None
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(raw)
