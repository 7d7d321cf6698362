"""Flat ``key = value`` run configuration with a stable fingerprint."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # global
    seed: int = 0
    side: int = 64
    precision: str = "float32"
    # noise schedule
    T: int = 1000
    k: int = 250
    beta_min: float = 1e-4
    beta_max: float = 0.02
    var_floor_ratio: float = 1e-4
    var_ceiling_ratio: float = 1.0
    # networks
    latent_dim: int = 8
    guide_mode: str = "gray"
    init_std: float = 0.02
    # training
    epochs: int = 500
    batch_size: int = 8
    lr_g: float = 1.6e-4
    lr_d: float = 1.6e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    lambda_rec: float = 50.0
    adv_loss: str = "lsgan"
    validation_fraction: float = 0.1
    # evaluation
    feature_extractor: str = "handcrafted-v1"

    def __post_init__(self):
        checks = [
            (self.side >= 16, "side must be >= 16"),
            (self.precision in ("float32", "float64"), "precision must be float32 or float64"),
            (self.guide_mode in ("gray", "onehot"), "guide_mode must be gray or onehot"),
            (self.adv_loss in ("lsgan", "logistic"), "adv_loss must be lsgan or logistic"),
            (0 < self.validation_fraction < 1, "validation_fraction must be in (0, 1)"),
            (self.lr_g >= 0 and self.lr_d >= 0, "learning rates must be non-negative"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.latent_dim >= 1, "latent_dim must be >= 1"),
            (self.init_std > 0, "init_std must be positive"),
            (self.lambda_rec >= 0, "lambda_rec must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def canonical(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.as_dict().items()))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        """Declaration-ordered text form, readable by :func:`parse_config`."""
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @property
    def dtype(self):
        import numpy as np
        return np.float32 if self.precision == "float32" else np.float64

    def schedule(self):
        from .diffusion import make_schedule
        return make_schedule(self.T, self.k, self.beta_min, self.beta_max,
                             var_floor_ratio=self.var_floor_ratio,
                             var_ceiling_ratio=self.var_ceiling_ratio)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str, where: str):
    kind = _TYPES[key]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: value {raw!r} for '{key}' is not a valid {kind}") from None
    return raw


def parse_config(text: str, overrides: Iterable[str] = (), source: str = "config") -> RunConfig:
    """Parse a config document; ``overrides`` are ``key=value`` strings."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        where = f"{source} line {lineno}"
        if key not in _TYPES:
            raise ConfigError(f"{where}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"{where}: duplicate key '{key}'")
        values[key] = _convert(key, raw, where)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"override {item!r}: unknown key '{key}'")
        values[key] = _convert(key, raw, f"override {item!r}")
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: Optional[Path], overrides: Iterable[str] = ()) -> RunConfig:
    if path is None:
        return parse_config("", overrides)
    path = Path(path)
    return parse_config(path.read_text(), overrides, source=str(path))
