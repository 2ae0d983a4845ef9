"""Model-scale configuration, presets, and config hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigurationError

# Desk-scale presets are trainable on CPU; vitb-shape mirrors the ViT-B layout
# and exists only for parameter accounting, never for forward/training at desk
# scale.
PRESETS: dict[str, dict] = {
    "tiny": dict(
        image_size=256, patch_size=16, encoder_dim=64, encoder_depth=2,
        encoder_heads=2, decoder_dim=64, decoder_depth=2,
    ),
    "small": dict(
        image_size=512, patch_size=16, encoder_dim=128, encoder_depth=4,
        encoder_heads=4, decoder_dim=128, decoder_depth=2,
    ),
    "vitb-shape": dict(
        image_size=1024, patch_size=16, encoder_dim=768, encoder_depth=12,
        encoder_heads=12, decoder_dim=256, decoder_depth=2,
    ),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for the promptable segmenter.

    ``mask_prompt_size`` is always ``image_size // 4`` (the dense-prompt and
    mask-logit resolution); passing 0 fills it in automatically. The model
    always emits exactly three mask hypotheses.
    """

    image_size: int = 1024
    patch_size: int = 16
    encoder_dim: int = 768
    encoder_depth: int = 12
    encoder_heads: int = 12
    decoder_dim: int = 256
    decoder_depth: int = 2
    num_mask_outputs: int = 3
    mask_prompt_size: int = 0
    scale_preset: str = "custom"

    def __post_init__(self) -> None:
        if self.mask_prompt_size == 0:
            object.__setattr__(self, "mask_prompt_size", self.image_size // 4)
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigurationError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.mask_prompt_size != self.image_size // 4:
            raise ConfigurationError("mask_prompt_size must equal image_size / 4")
        if self.num_mask_outputs != 3:
            raise ConfigurationError("the three-level mask output is structural; num_mask_outputs must be 3")
        if self.encoder_dim % self.encoder_heads != 0:
            raise ConfigurationError("encoder_dim must be divisible by encoder_heads")
        # The dense-prompt stem and the mask upscaler are both fixed x4
        # resamplers, which ties mask_prompt_size to 4x the embedding grid.
        if self.mask_prompt_size != 4 * self.grid_size:
            raise ConfigurationError(
                "mask_prompt_size must be 4x the embedding grid (use patch_size=16)"
            )
        if self.decoder_dim % 8 != 0:
            raise ConfigurationError("decoder_dim must be divisible by 8")
        internal = self.decoder_dim // 2
        if internal % self.decoder_heads != 0:
            raise ConfigurationError("decoder cross-attention width must split across heads")
        if self.encoder_dim % 4 != 0 or self.decoder_dim % 4 != 0:
            raise ConfigurationError("channel widths must be divisible by 4 for positional encodings")

    @property
    def grid_size(self) -> int:
        """Side of the patch-embedding grid (image_size / patch_size)."""
        return self.image_size // self.patch_size

    @property
    def decoder_heads(self) -> int:
        return max(2, self.decoder_dim // 32)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        kwargs = dict(PRESETS[name])
        kwargs.update(overrides)
        kwargs.setdefault("scale_preset", name)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(config: ModelConfig, model_seed: int) -> str:
    """Stable short hash of (architecture, base-weight seed).

    Adapter checkpoints embed this so they can only be loaded into the exact
    base model they were trained against.
    """
    payload = json.dumps(
        {"model": config.to_dict(), "model_seed": model_seed}, sort_keys=True
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
