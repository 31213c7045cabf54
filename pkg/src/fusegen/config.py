"""Validated configuration records for the model and training loop."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional


class ConfigError(ValueError):
    """Raised on an invalid or inconsistent configuration."""


@dataclass
class ModelConfig:
    """Every architectural hyperparameter in one place.

    Defaults are desk-scale: small enough for finite-difference checks, large
    enough that every mechanism (multi-head split, GQA grouping, both fusion
    stages) is exercised nontrivially.
    """

    # image encoder
    image_side: int = 16          # must be divisible by 8
    image_channels: int = 1
    e_v: int = 32                 # visual channel count E_V
    pos_init_std: float = 0.4     # grid-cell identity embedding scale

    # keyword encoder
    vocab_size: int = 64
    e_l: int = 32                 # keyword embedding dim E_L
    s_l: int = 4                  # keyword sequence length (padded)
    enc_layers: int = 2
    enc_heads: int = 4
    use_positional_encoding: bool = True

    # fusion
    p: int = 32                   # shared projection dim P
    h_v: Optional[int] = None     # abstractor hidden dims, default E_V / E_L
    h_l: Optional[int] = None
    adaptor_reg_weight: float = 0.0   # pull-to-target weight on the modality gate

    # alignment
    d_align: int = 32
    symmetric_align: bool = False

    # decoder
    dec_d: int = 64
    dec_layers: int = 2
    n_q: int = 4
    n_kv: int = 2
    d_ff: Optional[int] = None    # default: 4d/3 rounded to a multiple of 8
    max_report_len: int = 16
    rope_base: float = 10000.0
    rms_eps: float = 1e-5
    ln_eps: float = 1e-5

    # global switches
    attn_norm: str = "softmax"    # "softmax" | "sigmoid"
    dtype: str = "float64"        # "float64" | "float32"
    seed: int = 0
    init_std: float = 0.08

    # ablation toggles
    use_keywords: bool = True
    use_abstractor: bool = True
    use_adaptor: bool = True
    use_alignment: bool = True

    def __post_init__(self):
        if self.image_side % 8 != 0:
            raise ConfigError(f"image_side={self.image_side} not divisible by 8")
        if self.e_l % self.enc_heads != 0:
            raise ConfigError(f"enc_heads={self.enc_heads} must divide e_l={self.e_l}")
        if self.n_q % self.n_kv != 0:
            raise ConfigError(f"n_kv={self.n_kv} must divide n_q={self.n_q}")
        if self.dec_d % self.n_q != 0:
            raise ConfigError(f"n_q={self.n_q} must divide dec_d={self.dec_d}")
        if (self.dec_d // self.n_q) % 2 != 0:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.attn_norm not in ("softmax", "sigmoid"):
            raise ConfigError(f"attn_norm must be softmax or sigmoid, got {self.attn_norm!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if (self.use_abstractor or self.use_adaptor) and not self.use_keywords:
            raise ConfigError("abstractor/adaptor require the keyword branch")
        if self.h_v is None:
            self.h_v = self.e_v
        if self.h_l is None:
            self.h_l = self.e_l
        if self.d_ff is None:
            self.d_ff = max(8, int(round(4 * self.dec_d / 3 / 8)) * 8)

    @property
    def grid_side(self) -> int:
        return self.image_side // 8

    @property
    def s_v(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def head_dim(self) -> int:
        return self.dec_d // self.n_q


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 25
    lambda_align: float = 0.5
    scheduler: str = "warmup_cosine"  # "warmup_cosine" | "constant"
    warmup_frac: float = 0.05
    floor_frac: float = 0.10
    grad_clip: float = 1.0
    seed: int = 0
    n_train: int = 200
    n_eval: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.lambda_align < 0:
            raise ConfigError(f"lambda_align must be >= 0, got {self.lambda_align}")
        if self.scheduler not in ("warmup_cosine", "constant"):
            raise ConfigError(f"unknown scheduler {self.scheduler!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size >= 1 and epochs >= 0 required")


_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def config_to_dict(model: ModelConfig, train: TrainConfig) -> dict:
    d = dataclasses.asdict(model)
    for k, v in dataclasses.asdict(train).items():
        if k == "seed":
            continue  # model seed is authoritative
        d[k] = v
    return d


def config_from_dict(d: dict) -> tuple[ModelConfig, TrainConfig]:
    """Split a flat config dict into model/train records. Unknown keys reject."""
    unknown = set(d) - _MODEL_FIELDS - _TRAIN_FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = ModelConfig(**{k: v for k, v in d.items() if k in _MODEL_FIELDS})
    train_kw = {k: v for k, v in d.items() if k in _TRAIN_FIELDS}
    train_kw["seed"] = model.seed
    return model, TrainConfig(**train_kw)


def load_config(path: str) -> tuple[ModelConfig, TrainConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def save_config(model: ModelConfig, train: TrainConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(model, train), fh, indent=2, sort_keys=True)
        fh.write("\n")
