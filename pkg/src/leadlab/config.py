"""Model/partition configuration and deterministic seed derivation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np


class ConfigError(ValueError):
    """A configuration value violates its contract."""


INJECTION_MODES = ("none", "aux_only", "shared_gate", "layer_add", "layer_gate")

# Modes whose decoder pass rewrites hidden states with expert embeddings.
INJECTING_MODES = ("shared_gate", "layer_add", "layer_gate")

PARAM_GROUPS = (
    "vision_encoder",
    "connector",
    "llm_base",
    "lora_adapters",
    "expert_module",
    "lead_blocks",
)


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 26
    max_seq_len: int = 160
    patch_size: int = 8
    image_size: int = 64
    n_categories: int = 14
    d_vision: int = 64
    d_exp: int = 32
    lora_rank: int = 8
    lora_alpha: float = 16.0
    injection_mode: str = "layer_gate"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_vision % self.n_heads:
            raise ConfigError(f"d_vision {self.d_vision} not divisible by n_heads {self.n_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.lora_rank < 1:
            raise ConfigError(f"lora_rank must be >= 1, got {self.lora_rank}")
        if self.lora_alpha <= 0:
            raise ConfigError(f"lora_alpha must be > 0, got {self.lora_alpha}")
        if self.injection_mode not in INJECTION_MODES:
            raise ConfigError(f"unknown injection_mode {self.injection_mode!r}, expected one of {INJECTION_MODES}")
        if self.max_seq_len < self.n_patches + 2:
            raise ConfigError(f"max_seq_len {self.max_seq_len} cannot hold {self.n_patches} image patches")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**raw)

    def with_mode(self, mode: str) -> "ModelConfig":
        return replace(self, injection_mode=mode)


@dataclass(frozen=True)
class ParameterPartition:
    """Trainable flags for the six named parameter groups."""

    vision_encoder: bool = False
    connector: bool = False
    llm_base: bool = False
    lora_adapters: bool = False
    expert_module: bool = True
    lead_blocks: bool = True

    def validate(self):
        if self.lora_adapters and self.llm_base:
            raise ConfigError("llm_base must stay frozen while lora_adapters train")
        if not (self.expert_module and self.lead_blocks):
            raise ConfigError("expert_module and lead_blocks must be trainable")

    def trainable(self, group: str) -> bool:
        if group not in PARAM_GROUPS:
            raise ConfigError(f"unknown parameter group {group!r}")
        return getattr(self, group)

    def as_dict(self) -> dict:
        return {g: getattr(self, g) for g in PARAM_GROUPS}


PARTITION_PRESETS = {
    "frozen": ParameterPartition(),
    "vision_only": ParameterPartition(vision_encoder=True, connector=True),
    "lora_only": ParameterPartition(lora_adapters=True),
    "hybrid": ParameterPartition(vision_encoder=True, connector=True, lora_adapters=True),
}


def partition_preset(name: str) -> ParameterPartition:
    try:
        return PARTITION_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown partition preset {name!r}, expected one of {sorted(PARTITION_PRESETS)}") from None


def group_of(param_name: str) -> str:
    """Map a parameter name to its partition group."""
    if param_name.startswith("vision."):
        return "vision_encoder"
    if param_name.startswith("connector."):
        return "connector"
    if param_name.startswith("decoder."):
        return "lora_adapters" if ".lora_" in param_name else "llm_base"
    if param_name.startswith(("expert.", "expert_proj.")):
        return "expert_module"
    if param_name.startswith("lead."):
        return "lead_blocks"
    raise ConfigError(f"parameter {param_name!r} belongs to no known group")


def derive_seed(master_seed: int, name: str) -> int:
    """Split one master seed into named independent streams."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, name))
