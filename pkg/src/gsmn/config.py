"""Model and training configuration, plus the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError

DIRECTIONS = ("both", "t2i_only", "i2t_only")
ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class MatchConfig:
    # encoders
    region_dim: int = 2048
    embed_dim: int = 300
    joint_dim: int = 1024
    bidirectional: bool = True
    freeze_embeddings: bool = False
    normalize_nodes: bool = True
    # graphs and matching
    variant: str = "sparse"
    lambda_attn: float = 20.0
    lambda_graph: float | None = None  # None: same as lambda_attn
    blocks: int = 32
    kernels: int = 8
    kernel_dim: int = 32
    mlp_hidden: int = 256
    gcn_depth: int = 1
    gcn_activation: str = "tanh"
    direction: str = "both"
    use_structure: bool = True

    def __post_init__(self):
        if self.joint_dim % self.blocks:
            raise ConfigurationError(f"blocks={self.blocks} does not divide joint_dim={self.joint_dim}")
        if self.kernels < 1 or self.kernel_dim < 1 or self.mlp_hidden < 1:
            raise ConfigurationError("kernels, kernel_dim and mlp_hidden must be positive")
        if self.gcn_depth < 1:
            raise ConfigurationError("gcn_depth must be at least 1")
        if self.direction not in DIRECTIONS:
            raise ConfigurationError(f"direction must be one of {DIRECTIONS}")
        if self.variant not in ("sparse", "dense"):
            raise ConfigurationError("variant must be sparse or dense")
        if self.gcn_activation not in ACTIVATIONS:
            raise ConfigurationError(f"gcn_activation must be one of {ACTIVATIONS}")
        if not self.lambda_attn > 0 or (self.lambda_graph is not None and not self.lambda_graph > 0):
            raise ConfigurationError("lambda values must be positive")

    @property
    def graph_lambda(self) -> float:
        return self.lambda_attn if self.lambda_graph is None else self.lambda_graph

    @property
    def structure_width(self) -> int:
        return self.kernels * self.kernel_dim if self.use_structure else self.blocks


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    batch_size: int = 64
    lr: float = 2e-4
    lr_decay_factor: float = 0.9
    lr_decay_every: int = 15
    epochs: int = 30
    seed: int = 0
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    mask_same_image: bool = True

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigurationError("margin must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        if self.lr < 0 or self.epochs < 0 or self.lr_decay_every < 1:
            raise ConfigurationError("lr, epochs must be non-negative and lr_decay_every positive")


PRESETS = {
    "full": {},
    "w/o-graph": {"use_structure": False},
    "w/o-i2t": {"direction": "t2i_only"},
    "w/o-t2i": {"direction": "i2t_only"},
    "2gcn": {"gcn_depth": 2},
    "gru": {"bidirectional": False},
}


def _coerce(name: str, ftype, raw: str):
    text = raw.strip()
    if isinstance(ftype, str):
        ftype = ftype.replace(" ", "")
    try:
        if ftype in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if ftype in (int, "int"):
            return int(text)
        if ftype in (float, "float"):
            return float(text)
        if ftype in ("float|None",):
            return None if text.lower() in ("", "none") else float(text)
        return text
    except ValueError:
        raise ConfigurationError(f"bad value for {name}: {raw!r}") from None


def _field_types(cls):
    return {f.name: f.type for f in fields(cls)}


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {line_no}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_configs(values: dict[str, object] | None = None, base: tuple[MatchConfig, TrainConfig] | None = None
                  ) -> tuple[MatchConfig, TrainConfig]:
    """Apply string or typed overrides to (MatchConfig, TrainConfig); unknown keys are errors."""
    match, train = base or (MatchConfig(), TrainConfig())
    mtypes, ttypes = _field_types(MatchConfig), _field_types(TrainConfig)
    m_upd, t_upd = {}, {}
    for key, value in (values or {}).items():
        if key in mtypes:
            target, types = m_upd, mtypes
        elif key in ttypes:
            target, types = t_upd, ttypes
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
        target[key] = _coerce(key, types[key], value) if isinstance(value, str) else value
    return dataclasses.replace(match, **m_upd), dataclasses.replace(train, **t_upd)


def load_config(path, overrides: dict[str, object] | None = None) -> tuple[MatchConfig, TrainConfig]:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"))
    values.update(overrides or {})
    return build_configs(values)


def apply_preset(match: MatchConfig, preset: str) -> MatchConfig:
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(match, **PRESETS[preset])


def config_to_dict(match: MatchConfig, train: TrainConfig | None = None) -> dict:
    out = {"match": dataclasses.asdict(match)}
    if train is not None:
        out["train"] = dataclasses.asdict(train)
    return out


def format_config(match: MatchConfig, train: TrainConfig) -> str:
    lines = []
    for obj in (match, train):
        for f in fields(obj):
            value = getattr(obj, f.name)
            lines.append(f"{f.name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
