"""Training/run configuration and the flat key-value config file format.

Config files are diff-friendly text: one ``key = value`` per line, ``#``
comments, typed parsing against the dataclass fields, unknown keys
rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from typing import Optional


def derive_seed(master: int, stream: str) -> int:
    """Stable per-stream seed: sha256 of ``master:stream``, 63 bits."""
    digest = hashlib.sha256(f"{master}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


@dataclass
class TrainConfig:
    """Hyper-parameters for one training run.

    Defaults follow the published recipe where one exists (warmup 4000,
    Adam betas (0.9, 0.98), dropout 0.1, window 5, delta 1/2).
    """

    # latent paths per dialogue
    K: int = 1
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    dropout: float = 0.1
    max_len: int = 256
    encode_per_utterance: bool = False

    learning_rate: float = 1e-4
    batch_size: int = 32
    warmup_steps: int = 4000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping

    delta: float = 0.5
    window: int = 5
    max_steps: int = 1000
    seed: int = 0
    # weights on (contrastive, nll, distillation-kl)
    weight_beta: float = 1.0
    weight_nll: float = 1.0
    weight_kl: float = 1.0
    # teacher branch of the KL is a fixed target unless disabled
    block_teacher_grad: bool = True

    early_stop_patience: int = 10  # epochs on validation perplexity
    checkpoint_interval: int = 0  # steps; 0 disables periodic checkpoints
    threads: int = 1
    min_token_freq: int = 2

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if not 0 < self.delta:
            raise ValueError("delta must be > 0")


@dataclass
class RunConfig(TrainConfig):
    """TrainConfig plus file paths and decoding defaults for the CLI."""

    train_corpus: str = ""
    val_corpus: str = ""
    checkpoint_dir: str = ""
    decoding: str = "topk"  # greedy | beam | topk
    beam_width: int = 5
    top_k: int = 5
    max_new_tokens: int = 32
    mode: str = "expectation"  # expectation | sampled

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(
            **{k: v for k, v in dataclasses.asdict(self).items() if k in names}
        )


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"field '{key}': expected boolean, got '{raw}'")
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"field '{key}': {exc}") from None
    return raw


def parse_config_text(text: str, cls=RunConfig):
    """Parse ``key = value`` lines into a config instance."""
    types = {f.name: f.type for f in fields(cls)}
    # dataclass field types may be strings under future annotations
    concrete = {
        f.name: type(getattr(cls(), f.name)) for f in fields(cls)
    }
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown field '{key}'")
        values[key] = _parse_value(raw, concrete[key], key)
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str, cls=RunConfig):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), cls)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(payload: dict, cls=RunConfig):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in payload.items() if k in names})
