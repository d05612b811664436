"""Training configuration and its flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # knowledge
    l: int = 5
    n_prime: int = 10
    min_freq: int = 1
    max_vertices: int = 512
    # losses
    alpha: float = 0.2
    gamma: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.5)
    diversity_eps: float = 0.01
    # architecture
    d_model: int = 300
    num_layers: int = 2
    num_heads: int = 2
    ffn_mult: int = 4
    dropout: float = 0.1
    max_positions: int = 512
    concepts_first: bool = False
    # ablation switches
    use_cs_graph: bool = True
    use_ec_graph: bool = True
    use_coarse: bool = True
    use_fine: bool = True
    # optimisation
    batch_size: int = 16
    base_lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    warmup_steps: int = 4000
    pretrain_steps: int = 1000
    train_steps: int = 20000
    eval_every: int = 500
    patience: int = 3
    max_grad_norm: float = 5.0
    seed: int = 0
    # inference
    max_decode: int = 30

    def __post_init__(self):
        self.gamma = tuple(float(g) for g in self.gamma)
        self.validate()

    def validate(self) -> None:
        if len(self.gamma) != 4:
            raise ConfigError("gamma needs exactly four weights")
        positive = ("l", "n_prime", "min_freq", "max_vertices", "d_model", "num_layers", "num_heads",
                    "ffn_mult", "max_positions", "batch_size", "base_lr", "warmup_steps", "eval_every",
                    "patience", "max_decode", "adam_eps")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("alpha", "diversity_eps", "dropout", "pretrain_steps", "train_steps", "max_grad_norm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if any(g < 0 for g in self.gamma):
            raise ConfigError("gamma weights must be non-negative")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.d_model % self.num_heads:
            raise ConfigError("d_model must be divisible by num_heads")
        if self.max_decode > 30:
            raise ConfigError("max_decode is capped at 30 steps")

    @property
    def d_ff(self) -> int:
        return self.ffn_mult * self.d_model

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["gamma"] = list(self.gamma)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_value(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(float(x) for x in raw.split(","))
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key}")


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not key=value")
        key = key.strip().replace("-", "_")
        out[key] = parse_value(key, value)
    return out


def read_config_values(path) -> dict:
    """Only the keys present in the file, parsed."""
    values = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key=value")
        values.update(parse_overrides([line]))
    return values


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    values = read_config_values(path)
    values.update(overrides or {})
    return TrainConfig.from_dict(values)


def config_field_names() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
