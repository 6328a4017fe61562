"""Experiment configuration: dataclasses, seed streams, key=value files.

One root seed feeds every source of randomness through named streams
(``init``, ``data``, ``dropout``, ``kmeans``), so two runs that differ only
in model topology still draw identical datasets and identical init order
for the parameters they share.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

import numpy as np


class ConfigError(ValueError):
    """A configuration value or key is invalid; the message names it."""


def stream_seed(root, name):
    """A stable 64-bit seed for the named stream under the given root seed."""
    digest = hashlib.sha256(f"{int(root)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream_rng(root, name):
    return np.random.default_rng(stream_seed(root, name))


def clip_seed(data_seed, index):
    """Per-clip seed; clips are independent streams under the data seed."""
    return stream_seed(data_seed, f"clip:{index}")


@dataclass(frozen=True)
class GeneratorConfig:
    """Shape and randomness of the synthetic clip generator."""

    T: int = 7
    N: int = 8
    D_in: int = 8
    G_cls: int = 8
    A_cls: int = 6
    noise_sigma: float = 0.05
    task_family: str = "interaction"
    seed: int = 0

    def validate(self):
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")
        if self.N < 2:
            raise ConfigError(f"N must be >= 2, got {self.N}")
        if self.D_in < 5:
            raise ConfigError(f"D_in must be >= 5 (2 position + 2 velocity + archetype dims), got {self.D_in}")
        if self.G_cls < 2:
            raise ConfigError(f"G_cls must be >= 2, got {self.G_cls}")
        if self.A_cls < 2:
            raise ConfigError(f"A_cls must be >= 2, got {self.A_cls}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.task_family not in ("interaction", "majority"):
            raise ConfigError(f"task_family must be interaction or majority, got {self.task_family!r}")
        if self.task_family == "interaction" and self.G_cls % 2 != 0:
            raise ConfigError(f"interaction family needs even G_cls (pattern x half), got {self.G_cls}")
        if self.task_family == "interaction" and self.G_cls // 2 > self.A_cls:
            raise ConfigError(
                f"interaction family needs G_cls // 2 <= A_cls so every pairing "
                f"pattern is realizable, got G_cls={self.G_cls}, A_cls={self.A_cls}")
        if self.task_family == "majority" and self.A_cls > self.G_cls:
            raise ConfigError(f"majority family needs A_cls <= G_cls, got {self.A_cls} > {self.G_cls}")
        return self


VARIANTS = ("baseline", "spatial", "stacked", "parallel", "ours")
CLUSTER_MODES = ("lloyd", "minibatch")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule plus the model hyperparameters it trains."""

    lr: float = 1e-4
    decay_epochs: tuple = (50, 100)
    decay_factor: float = 10.0
    batch_size: int = 16
    epochs: int = 60
    lam: float = 1.0
    seed: int = 0
    dropout: float = 0.1
    D: int = 32
    heads: int = 4
    C: int = 4
    blocks: int = 2
    grg: bool = True
    scene_tokens: int = 8
    cluster_mode: str = "lloyd"
    kmeans_iters: int = 8
    variant: str = "ours"
    intra: bool = True
    inter: bool = True
    n_clips: int = 2000
    grad_clip: float = 5.0
    workers: int = 1

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must be > 1, got {self.decay_factor}")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ConfigError(f"decay_epochs must be sorted, got {self.decay_epochs}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.D % self.heads != 0:
            raise ConfigError(f"D={self.D} must be divisible by heads={self.heads}")
        if self.C < 1:
            raise ConfigError(f"C must be >= 1, got {self.C}")
        if self.blocks < 0:
            raise ConfigError(f"blocks must be >= 0, got {self.blocks}")
        if self.scene_tokens < 1:
            raise ConfigError(f"scene_tokens must be >= 1, got {self.scene_tokens}")
        if self.kmeans_iters < 1:
            raise ConfigError(f"kmeans_iters must be >= 1, got {self.kmeans_iters}")
        if self.cluster_mode not in CLUSTER_MODES:
            raise ConfigError(f"cluster_mode must be one of {CLUSTER_MODES}, got {self.cluster_mode!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.n_clips < 1:
            raise ConfigError("batch_size, epochs and n_clips must be positive")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        return self


# file keys that differ from the dataclass attribute ("lambda" is reserved)
_KEY_ALIASES = {"lambda": "lam"}
_GEN_FIELDS = {f.name for f in fields(GeneratorConfig)}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


def _parse_value(key, raw, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            if raw.lower() in ("true", "1", "on", "yes"):
                return True
            if raw.lower() in ("false", "0", "off", "no"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip()) if raw else ()
        return raw
    except ValueError:
        raise ConfigError(f"bad value for key {key!r}: {raw!r}") from None


def parse_config_text(text):
    """Parse ``key = value`` lines (# comments allowed) into a raw dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line.strip()!r}")
        key, raw = stripped.split("=", 1)
        out[key.strip()] = raw.strip()
    return out


def resolve_configs(raw, overrides=None):
    """Build validated (GeneratorConfig, TrainConfig) from raw string maps.

    ``overrides`` (e.g. CLI flags) win over file values. Unknown keys are
    errors so typos never silently fall back to defaults. ``seed`` is shared
    by both configs.
    """
    merged = dict(raw or {})
    merged.update(overrides or {})
    gen_kwargs, train_kwargs = {}, {}
    types = {f.name: f for cfg in (GeneratorConfig, TrainConfig) for f in fields(cfg)}
    for key, raw_value in merged.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in _GEN_FIELDS and name not in _TRAIN_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        value = raw_value
        if isinstance(value, str):
            value = _parse_value(key, value, type(getattr(types[name], "default")))
        if name in _GEN_FIELDS:
            gen_kwargs[name] = value
        if name in _TRAIN_FIELDS:
            train_kwargs[name] = value
    gen = GeneratorConfig(**gen_kwargs).validate()
    train = TrainConfig(**train_kwargs).validate()
    return gen, train


def config_dict(gen, train):
    """Flat serializable snapshot of both configs, file-key spelling."""
    out = {}
    for cfg in (gen, train):
        for f in fields(cfg):
            key = "lambda" if f.name == "lam" else f.name
            value = getattr(cfg, f.name)
            out[key] = list(value) if isinstance(value, tuple) else value
    return out


def with_updates(cfg, **updates):
    """Functional update that re-validates."""
    return replace(cfg, **updates).validate()
