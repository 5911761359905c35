"""Run configuration: defaults, ``key = value`` files and validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    height: int = 112
    width: int = 56
    patch_size: int = 14
    k: int = 8
    alpha: float = 0.02
    lr: float = 0.01
    decay: float = 0.96
    P: int = 8
    K: int = 4
    mining: str = "semi-hard"
    global_epochs: int = 40
    triplet_epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    dtype: str = "float32"
    local_channels: str = "32,64,24"
    n_test_ids: int = 10
    augment: bool = False
    protocol: str = "two-camera"
    same_camera_filter: bool = False
    max_rank: int = 20
    fusion: str = "norm-matched"

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self.local_channels.split(","))

    def validate(self) -> "Config":
        if self.height % 14 or self.width % 14 or self.height <= 0 or self.width <= 0:
            raise ConfigError(f"image dims must be positive multiples of 14, got {self.height}x{self.width}")
        if self.patch_size != 14:
            raise ConfigError("patch_size is fixed at 14 by the global network's total stride")
        cells = (self.height // 14) * (self.width // 14)
        if not 1 <= self.k <= cells:
            raise ConfigError(f"k must be in [1, {cells}], got {self.k}")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.lr < 0 or not 0 < self.decay <= 1:
            raise ConfigError("need lr >= 0 and 0 < decay <= 1")
        if self.P < 2 or self.K < 2:
            raise ConfigError("need P >= 2 and K >= 2")
        if self.mining not in ("hard", "semi-hard", "all"):
            raise ConfigError(f"mining must be hard, semi-hard or all, got {self.mining!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.fusion not in ("replace", "norm-matched"):
            raise ConfigError(f"fusion must be replace or norm-matched, got {self.fusion!r}")
        if self.protocol not in ("two-camera", "none"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        try:
            ch = self.channels
        except ValueError:
            raise ConfigError(f"local_channels must be comma-separated integers, got {self.local_channels!r}")
        if not ch or min(ch) < 1:
            raise ConfigError("local_channels must be positive")
        for name in ("global_epochs", "triplet_epochs", "batch_size", "n_test_ids", "max_rank"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def updated(self, **overrides) -> "Config":
        out = dataclasses.replace(self)
        for key, value in overrides.items():
            _set(out, key, value)
        return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_FIELDS = {f.name: f for f in fields(Config)}


def _coerce(key: str, raw):
    f = _FIELDS[key]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _set(cfg: Config, key: str, value) -> None:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(cfg, key, _coerce(key, value))


def parse(text: str, base: Config | None = None) -> Config:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    cfg = dataclasses.replace(base) if base is not None else Config()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        _set(cfg, key, value)
    return cfg


def load(path, base: Config | None = None) -> Config:
    return parse(Path(path).read_text(), base)
