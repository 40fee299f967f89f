"""Typed configuration models for the encoder, losses, training and domains."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

NUM_STAGES = 4
SYSTEM_CONFIG_FILE = "./config.yaml"


class EncoderConfig(BaseModel):
    """Hyper-parameters of the windowed-attention encoder."""

    patch_embed_size: int = 2
    embed_dim: int = 16
    depths: list[int] = Field(default_factory=lambda: [2, 2, 2, 2])
    heads: list[int] = Field(default_factory=lambda: [2, 2, 4, 4])
    window: tuple[int, int, int] = (2, 3, 4)
    mlp_ratio: float = 2.0
    band_dims: Optional[tuple[int, int, int]] = None
    init_std: float = 0.02
    head_init_std: float = 0.01

    @model_validator(mode="after")
    def check_stage_layout(self) -> "EncoderConfig":
        """Validate stage counts, head divisibility and window extents."""
        if len(self.depths) != NUM_STAGES or len(self.heads) != NUM_STAGES:
            raise ValueError(
                f"depths and heads must both have {NUM_STAGES} entries, "
                f"got {self.depths} and {self.heads}"
            )
        if any(d < 1 for d in self.depths):
            raise ValueError(f"every stage needs at least one block, got {self.depths}")
        for s, h in enumerate(self.heads):
            dim = self.embed_dim * 2**s
            if h < 1 or dim % h != 0:
                raise ValueError(f"stage {s}: {dim} channels not divisible by {h} heads")
        if any(w < 1 for w in self.window):
            raise ValueError(f"window extents must be >= 1, got {self.window}")
        if self.patch_embed_size < 1:
            raise ValueError("patch_embed_size must be >= 1")
        if self.band_dims is not None and any(b < 1 for b in self.band_dims):
            raise ValueError(f"band_dims must be positive, got {self.band_dims}")
        return self

    def stage_dim(self, stage: int) -> int:
        """Channel count of tokens inside the given stage."""
        return self.embed_dim * 2**stage

    def resolve_band_dims(self, full_dims: tuple[int, int, int]) -> tuple[int, int, int]:
        """Return the low-resolution field extents for a volume of ``full_dims``.

        Falls back to a quarter of each axis (rounded up) when unset.
        """
        if self.band_dims is not None:
            return tuple(min(b, f) for b, f in zip(self.band_dims, full_dims))  # type: ignore[return-value]
        return tuple(max(1, math.ceil(f / 4)) for f in full_dims)  # type: ignore[return-value]


class LossConfig(BaseModel):
    """Similarity term, regularization weight and NCC window."""

    model_config = ConfigDict(populate_by_name=True)

    similarity: Literal["MSE", "NCC"] = "NCC"
    reg_weight: Optional[float] = Field(default=None, alias="lambda")
    ncc_window: int = 9
    ncc_eps: float = 1e-5

    @model_validator(mode="after")
    def resolve_reg_weight(self) -> "LossConfig":
        """Fill in the per-similarity default weight and check ranges."""
        if self.reg_weight is None:
            self.reg_weight = 1.0 if self.similarity == "NCC" else 0.2
        if self.reg_weight < 0:
            raise ValueError(f"lambda must be >= 0, got {self.reg_weight}")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError(f"ncc_window must be odd and >= 3, got {self.ncc_window}")
        return self

    @property
    def lam(self) -> float:
        """Resolved regularization weight."""
        return float(self.reg_weight)  # type: ignore[arg-type]


class TrainConfig(BaseModel):
    """Optimization and data-protocol settings for one training run."""

    lr: float = 5e-4
    epochs: int = 500
    patience: int = 30
    seed: int = 0
    pairs_per_epoch: int = 8
    val_pairs: int = 4
    training_domain: str = "identity"
    dg_enabled: bool = True
    dg_patch_size: int = 4
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    loss: LossConfig = Field(default_factory=LossConfig)

    @model_validator(mode="after")
    def check_schedule(self) -> "TrainConfig":
        """Validate the learning rate and early-stopping window."""
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.patience >= self.epochs:
            raise ValueError(
                f"patience ({self.patience}) must be smaller than epochs ({self.epochs})"
            )
        if self.dg_patch_size < 1:
            raise ValueError("dg_patch_size must be >= 1")
        if self.pairs_per_epoch < 1 or self.val_pairs < 1:
            raise ValueError("pairs_per_epoch and val_pairs must be >= 1")
        return self

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        """Load a TrainConfig from a JSON file.

        Args:
            path: Path to the JSON configuration file.

        Returns:
            A fully validated TrainConfig instance.
        """
        with open(path, "r") as f:
            data = json.load(f)
        return cls.model_validate(data)


class DomainSpec(BaseModel):
    """Intensity transfer, bias field and noise that emulate one imaging domain."""

    name: str
    description: str = ""
    gain: float = 1.0
    offset: float = 0.0
    gamma: float = 1.0
    noise_sd: float = 0.0
    bias_amplitude: float = 0.0

    @model_validator(mode="after")
    def transfer_is_monotone(self) -> "DomainSpec":
        """Reject flat transfers and invalid gamma, noise or bias values."""
        if self.gain == 0:
            raise ValueError(f"domain {self.name}: gain must be non-zero")
        if self.gamma <= 0:
            raise ValueError(f"domain {self.name}: gamma must be > 0")
        if self.noise_sd < 0 or not 0 <= self.bias_amplitude < 1:
            raise ValueError(f"domain {self.name}: noise_sd >= 0 and 0 <= bias_amplitude < 1")
        return self

    @property
    def inverting(self) -> bool:
        """True when the transfer flips contrast (T1/T2-like)."""
        return self.gain < 0


class RuntimeSettings(BaseSettings):
    """Process-level settings read from NEUREG_* environment variables.

    With env_prefix="NEUREG_", field `system_config` maps to env var
    `NEUREG_SYSTEM_CONFIG`, etc.
    """

    system_config: str = SYSTEM_CONFIG_FILE
    log_level: Optional[str] = None
    threads: int = 1

    model_config = SettingsConfigDict(env_prefix="NEUREG_")


def load_system_config(path: str | Path = SYSTEM_CONFIG_FILE) -> dict[str, Any]:
    """Read the YAML system configuration (paths and logging block).

    Args:
        path: Location of config.yaml.

    Returns:
        The parsed mapping.
    """
    return yaml.safe_load(Path(path).read_text())
