"""Training configuration and its flat key-value file format."""
import json
from dataclasses import asdict, dataclass, fields
from typing import Tuple

MODEL_KINDS = ("lognormmix", "lognormal", "dsflow", "sosflow", "fullynn", "gompertz", "exponential")
IMPUTATION = ("none", "mean", "reparam")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class TrainConfig:
    model: str = "lognormmix"
    K: int = 64                 # mixture components, or components per DSF/SOS layer
    M: int = 2                  # flow layers
    R: int = 3                  # SOS polynomial degree
    D: int = 64                 # FullyNN hidden width
    H: int = 64                 # RNN hidden size
    mark_dim: int = 32
    meta_dim: int = 64
    seq_dim: int = 32
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 2000
    patience: int = 100
    l2: float = 0.0
    chunk_len: int = 128
    split: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    history: bool = True
    marks: bool = False
    metadata: bool = False
    sequence_embedding: bool = False
    pretrain_epochs: int = 0    # sequence-embedding warm-up with history disabled
    imputation: str = "none"
    mc_samples: int = 10
    temperature: float = 1.0
    clip_norm: float = 10.0
    eval_every: int = 1

    def __post_init__(self):
        self.split = tuple(float(x) for x in self.split)
        self.validate()

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError("model", f"unknown model {self.model!r}; expected one of {MODEL_KINDS}")
        if self.imputation not in IMPUTATION:
            raise ConfigError("imputation", f"expected one of {IMPUTATION}")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError("split", "fractions must be three non-negative numbers summing to 1")
        if not 0 <= self.patience < self.max_epochs:
            raise ConfigError("patience", "must satisfy 0 <= patience < max_epochs")
        for name in ("K", "M", "D", "H", "batch_size", "chunk_len", "mc_samples", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be a positive integer")
        if self.R < 0:
            raise ConfigError("R", "must be non-negative")
        for name in ("lr", "temperature"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be positive")
        if self.l2 < 0:
            raise ConfigError("l2", "must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigError("<root>", "config must be a flat JSON object")
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls().to_dict()
        clean = {}
        for key, value in obj.items():
            if key not in types:
                raise ConfigError(key, "unknown key")
            expected = defaults[key]
            if isinstance(expected, bool):
                ok = isinstance(value, bool)
            elif isinstance(expected, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif isinstance(expected, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            elif isinstance(expected, list):
                ok = isinstance(value, list) and all(isinstance(v, (int, float)) for v in value)
            else:
                ok = isinstance(value, type(expected))
            if not ok:
                raise ConfigError(key, f"expected {type(expected).__name__}, got {type(value).__name__}")
            clean[key] = value
        return cls(**clean)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("<root>", f"invalid JSON: {exc.msg}") from None
        return cls.from_dict(obj)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return TrainConfig(**d)
