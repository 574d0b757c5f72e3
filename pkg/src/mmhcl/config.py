"""Model hyperparameters, named presets and config digests."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    u2u_layers: int = 2
    i2i_layers: int = 2
    backbone_layers: int = 2
    knn_k: int = 10
    alpha: float = 0.1
    beta: float = 0.7
    tau: float = 0.4
    reg: float = 1e-3
    lr: float = 1e-4
    batch_size: int = 1024
    epochs: int = 250
    patience: int = 5
    seed: int = 0
    use_u2u: bool = True
    use_i2i: bool = True
    use_scl: bool = True
    hgnn_style: bool = False
    contrast_scope: str = "batch"
    monitor_k: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        for name in ("u2u_layers", "i2i_layers", "backbone_layers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        for name in ("alpha", "beta", "reg", "lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1 or self.monitor_k < 1:
            raise ConfigError("batch_size, epochs, patience and monitor_k must be >= 1")
        if self.contrast_scope not in ("batch", "full"):
            raise ConfigError("contrast_scope must be 'batch' or 'full'")
        for name in ("use_u2u", "use_i2i", "use_scl", "hgnn_style"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be a boolean")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.use_scl else 0.0

    @property
    def effective_beta(self) -> float:
        return self.beta if self.use_scl else 0.0

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


MODEL_FIELDS = frozenset(f.name for f in dataclasses.fields(ModelConfig))

# per-dataset values from the reference hyperparameter table
PRESETS: dict[str, dict] = {
    "tiktok": dict(knn_k=5, alpha=0.03, beta=0.07, tau=0.6, reg=1e-3, u2u_layers=3, i2i_layers=2),
    "clothing": dict(knn_k=10, alpha=0.1, beta=0.7, tau=0.4, reg=1e-3, u2u_layers=2, i2i_layers=2),
    "sports": dict(knn_k=5, alpha=0.3, beta=0.7, tau=0.5, reg=1e-5, u2u_layers=2, i2i_layers=2),
    # desk-scale planted corpus; larger steps so training converges in tens of epochs
    "synthetic": dict(dim=32, knn_k=10, alpha=0.1, beta=0.7, tau=0.4, reg=1e-4,
                      u2u_layers=1, i2i_layers=2, backbone_layers=2,
                      lr=0.01, batch_size=256, epochs=50, patience=10, seed=1),
}

SYNTHETIC_CORPUS = dict(users=200, items=120, blocks=4, noise=0.05, seed=1)


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
