"""Model hyperparameters, ablation switches and JSON config files."""
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from errors import ConfigError
from features import FEATURE2ID, HORIZON_STEPS, VARIANTS, feature_ids, resolve_variant


@dataclass
class ModelConfig:
    history: int = 12
    horizon: int = 9
    kernel_size: int = 3
    blocks: int = 2
    channels: int = 64
    num_heads: int = 4
    head_dim: Optional[int] = None
    depth: int = 1
    hidden: int = 64
    fused_width: int = 64
    keep_prob: float = 0.9
    per_step_attention: bool = False
    target_features: List[str] = field(default_factory=lambda: ["flow"])
    horizons: List[int] = field(default_factory=lambda: list(HORIZON_STEPS))
    # None defers to the dataset manifest or the graph defaults
    sigma2: Optional[float] = None
    eps: Optional[float] = None
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    lr_schedule: str = "none"
    warmup_fraction: float = 0.1
    patience: int = 0
    val_fraction: float = 0.1
    repeats: int = 3

    def validate(self) -> "ModelConfig":
        for name in ("history", "horizon", "kernel_size", "blocks", "channels", "num_heads",
                     "depth", "hidden", "fused_width", "batch_size", "epochs", "repeats"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.head_dim is not None and self.head_dim < 1:
            raise ConfigError(f"head_dim must be positive, got {self.head_dim}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.history - self.blocks * (self.kernel_size - 1) < 1:
            raise ConfigError(
                f"history {self.history} is too short for {self.blocks} blocks of kernel {self.kernel_size}"
            )
        unknown = [f for f in self.target_features if f not in FEATURE2ID]
        if unknown or not self.target_features:
            raise ConfigError(f"unknown target features {unknown}")
        bad = [h for h in self.horizons if not 1 <= h <= self.horizon]
        if bad:
            raise ConfigError(f"reporting horizons {bad} fall outside 1..{self.horizon}")
        if self.lr_schedule not in ("none", "linear"):
            raise ConfigError(f"lr_schedule must be 'none' or 'linear', got {self.lr_schedule!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        return self

    def target_ids(self) -> List[int]:
        return feature_ids(self.target_features)


@dataclass
class AblationFlags:
    no_global: bool = False
    no_local: bool = False
    no_feature_enhance: bool = False
    no_gate: bool = False
    no_residual: bool = False

    def validate(self) -> "AblationFlags":
        if self.no_global and self.no_local:
            raise ConfigError("no_global and no_local cannot both be set")
        return self

    @classmethod
    def from_variant(cls, name: str) -> "AblationFlags":
        try:
            return cls(**resolve_variant(name)).validate()
        except KeyError:
            raise ConfigError(f"unknown variant {name!r}") from None

    def variant_name(self) -> str:
        active = asdict(self)
        for name, switches in VARIANTS.items():
            if all(active[k] == switches.get(k, False) for k in active):
                return name
        return "+".join(k for k, v in active.items() if v)


def _take(cls, values: Dict[str, Any], source: str):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    return cls(**values)


def split_flat(values: Dict[str, Any]) -> Tuple[Dict[str, Any], Dict[str, Any], Dict[str, Any]]:
    """Sort a flat mapping into model, flag and graph keys."""
    from graphio import GraphConfig

    model_keys = {f.name for f in fields(ModelConfig)}
    flag_keys = {f.name for f in fields(AblationFlags)}
    graph_keys = {f.name for f in fields(GraphConfig)} - model_keys
    model, flags, graph = {}, {}, {}
    for key, value in values.items():
        if key in model_keys:
            model[key] = value
        elif key in flag_keys:
            flags[key] = value
        elif key in graph_keys:
            graph[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return model, flags, graph


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> Tuple[ModelConfig, AblationFlags, Dict[str, Any]]:
    """Read a JSON config (nested or flat) and apply CLI overrides on top."""
    model, flags, graph = {}, {}, {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        nested = {k: raw.pop(k) for k in ("model", "flags", "graph") if isinstance(raw.get(k), dict)}
        model, flags, graph = split_flat(raw)
        model.update(nested.get("model", {}))
        flags.update(nested.get("flags", {}))
        graph.update(nested.get("graph", {}))
    if overrides:
        extra_model, extra_flags, extra_graph = split_flat(
            {k: v for k, v in overrides.items() if v is not None})
        model.update(extra_model)
        flags.update(extra_flags)
        graph.update(extra_graph)
    config = _take(ModelConfig, model, "model").validate()
    ablation = _take(AblationFlags, flags, "flags").validate()
    return config, ablation, graph


def dump_config(config: ModelConfig, flags: AblationFlags, **extra) -> Dict[str, Any]:
    return {"model": asdict(config), "flags": asdict(flags), **extra}
