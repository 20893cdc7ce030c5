"""Model/training configuration and its flat ``key=value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .lattice import LatticeGeometry, MapKind


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    # desk-scale defaults; ``published_defaults()`` gives the full-size setting
    H: int = 64
    N: int = 64
    K: int = 3
    A: int = 8
    kappa: int = 5
    L: int = 2
    d_v: int = 64
    d_f: int = 64
    d_s: int = 300
    lr: float = 1e-4
    batch: int = 32
    epochs: int = 30
    nms_iou: float = 0.49
    pool_or_conv: str = "conv"
    seed: int = 0
    # not part of the published parameter list
    map: str = "multi"
    d_raw: int = 64
    vocab: int = 1024
    lstm_layers: int = 3
    head_layers: int = 1
    batch_norm: bool = True
    fusion_bias: bool = True
    share_scales: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("H", "N", "K", "A", "kappa", "L", "d_v", "d_f", "d_s", "batch", "d_raw", "vocab",
                     "lstm_layers", "head_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.kappa % 2 == 0:
            raise ConfigError(f"kappa must be odd for symmetric zero padding, got {self.kappa}")
        if self.pool_or_conv not in ("pool", "conv"):
            raise ConfigError(f"pool_or_conv must be 'pool' or 'conv', got {self.pool_or_conv!r}")
        if self.map not in {m.value for m in MapKind}:
            raise ConfigError(f"map must be one of dense/sparse/multi, got {self.map!r}")
        if self.pool_or_conv == "conv" and self.A % 2:
            raise ConfigError("the stacked-convolution extractor needs an even A")
        if not 0 < self.nms_iou <= 1:
            raise ConfigError(f"nms_iou must be in (0, 1], got {self.nms_iou}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @classmethod
    def published_defaults(cls, **overrides) -> "ModelConfig":
        base = dict(H=512, N=64, K=3, A=16, kappa=17, L=2, d_v=512, d_f=512, batch=32)
        base.update(overrides)
        return cls(**base)

    def geometry(self, N: int | None = None) -> LatticeGeometry:
        return LatticeGeometry(MapKind(self.map), self.N if N is None else N, self.A, self.K)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # -- key=value text
    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in sorted(fields(self), key=lambda f: f.name))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = _parse(types[key], val)
            except ValueError as e:
                raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from e
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_text())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(typ, val: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        low = val.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(val)
    if typ == "int":
        return int(val)
    if typ == "float":
        return float(val)
    return val
