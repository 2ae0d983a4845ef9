"""Low-rank adapter algebra, injection into attention q/v projections,
freezing control, parameter accounting, and weight merging.

Conventions: a wrapped projection with input width d and output width k is
shadowed by B in R^[d x r] (zero at construction) and A in R^[r x k]
(Gaussian at construction), so the adapted map is
x @ W0 + (x @ B) @ A * scale and the merged weight is W0 + B @ A * scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple, Union

import torch
from torch import nn

from .errors import ConfigurationError
from .model.common import Attention

ENCODER_TARGET = "image_encoder"
DECODER_TARGET = "mask_decoder"
VALID_TARGETS = (ENCODER_TARGET, DECODER_TARGET)

DEFAULT_RANK = 4
DEFAULT_INIT_STD = 5.0


@dataclass(frozen=True)
class InjectionPlan:
    """Where and how low-rank adapters are inserted.

    Only the query and value projections are ever wrapped; key/output
    projections and the prompt encoder are left untouched.
    """

    targets: Tuple[str, ...] = (ENCODER_TARGET, DECODER_TARGET)
    rank: int = DEFAULT_RANK
    projections: Tuple[str, ...] = ("query", "value")
    scale: float = 1.0
    init_std: float = DEFAULT_INIT_STD

    def __post_init__(self) -> None:
        targets = tuple(sorted(set(self.targets)))
        object.__setattr__(self, "targets", targets)
        if not targets:
            raise ConfigurationError("injection plan needs at least one target")
        unknown = [t for t in targets if t not in VALID_TARGETS]
        if unknown:
            raise ConfigurationError(f"unknown injection targets {unknown}; valid: {VALID_TARGETS}")
        if tuple(sorted(self.projections)) != ("query", "value"):
            raise ConfigurationError("projections are fixed to exactly {query, value}")
        if self.rank < 1:
            raise ConfigurationError("rank must be >= 1")

    def to_dict(self) -> dict:
        return {
            "targets": list(self.targets),
            "rank": self.rank,
            "projections": list(self.projections),
            "scale": self.scale,
            "init_std": self.init_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionPlan":
        return cls(
            targets=tuple(d["targets"]),
            rank=int(d["rank"]),
            projections=tuple(d.get("projections", ("query", "value"))),
            scale=float(d.get("scale", 1.0)),
            init_std=float(d.get("init_std", DEFAULT_INIT_STD)),
        )


class LoraLayer(nn.Module):
    """A trainable low-rank pair (B, A) shadowing one frozen [d, k] weight."""

    def __init__(
        self,
        d: int,
        k: int,
        rank: int,
        init_std: float = DEFAULT_INIT_STD,
        scale: float = 1.0,
        generator: Optional[torch.Generator] = None,
    ) -> None:
        super().__init__()
        if rank < 1:
            raise ConfigurationError("rank must be >= 1")
        if rank > min(d, k):
            raise ConfigurationError(f"rank {rank} exceeds min(d, k) = {min(d, k)}")
        if rank > min(d, k) // 4:
            warnings.warn(
                f"rank {rank} is large relative to min(d, k) = {min(d, k)}; "
                "the low-rank assumption is questionable",
                stacklevel=2,
            )
        self.d = d
        self.k = k
        self.rank = rank
        self.scale = scale
        self.lora_B = nn.Parameter(torch.zeros(d, rank))
        a = torch.empty(rank, k)
        a.normal_(mean=0.0, std=init_std, generator=generator)
        self.lora_A = nn.Parameter(a)

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        """Low-rank contribution (x @ B) @ A * scale, never forming B @ A."""
        return (x @ self.lora_B) @ self.lora_A * self.scale

    def extra_repr(self) -> str:
        return f"d={self.d}, k={self.k}, rank={self.rank}, scale={self.scale}"


def make_lora(
    d: int,
    k: int,
    rank: int,
    rng: Union[int, torch.Generator, None] = None,
    init_std: float = DEFAULT_INIT_STD,
    scale: float = 1.0,
) -> LoraLayer:
    """Construct a LoraLayer: B all-zero, A ~ N(0, init_std^2), seedable."""
    if isinstance(rng, int):
        generator = torch.Generator().manual_seed(rng)
    else:
        generator = rng
    return LoraLayer(d, k, rank, init_std=init_std, scale=scale, generator=generator)


def lora_forward(layer: LoraLayer, w0: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Adapted forward x @ W0 + (x @ B) @ A * scale for x [n, d], W0 [d, k]."""
    if w0.shape != (layer.d, layer.k):
        raise ConfigurationError(f"W0 shape {tuple(w0.shape)} != ({layer.d}, {layer.k})")
    if x.shape[-1] != layer.d:
        raise ConfigurationError(f"input width {x.shape[-1]} != d = {layer.d}")
    return x @ w0 + layer.delta(x)


def merge_weights(w0: torch.Tensor, layer: LoraLayer) -> torch.Tensor:
    """Fold the adapter into the frozen weight: W0 + B @ A * scale."""
    if w0.shape != (layer.d, layer.k):
        raise ConfigurationError(f"W0 shape {tuple(w0.shape)} != ({layer.d}, {layer.k})")
    return w0 + layer.lora_B @ layer.lora_A * layer.scale


class LoraLinear(nn.Module):
    """An nn.Linear with an additive low-rank path; the base stays frozen."""

    def __init__(
        self,
        base: nn.Linear,
        rank: int,
        init_std: float = DEFAULT_INIT_STD,
        scale: float = 1.0,
        generator: Optional[torch.Generator] = None,
    ) -> None:
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.adapter = LoraLayer(
            base.in_features, base.out_features, rank,
            init_std=init_std, scale=scale, generator=generator,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.adapter.delta(x)

    def merged_weight(self) -> torch.Tensor:
        """Base weight in torch's [out, in] layout with B @ A folded in."""
        delta = (self.adapter.lora_B @ self.adapter.lora_A) * self.adapter.scale
        return self.base.weight + delta.T


def iter_attention_modules(root: nn.Module) -> Iterator[Tuple[str, Attention]]:
    """Walk ``root`` in definition order yielding attention modules by path."""
    for name, module in root.named_modules():
        if isinstance(module, Attention):
            yield name, module


def iter_lora_modules(model: nn.Module) -> Iterator[Tuple[str, LoraLinear]]:
    for name, module in model.named_modules():
        if isinstance(module, LoraLinear):
            yield name, module


def inject(model: nn.Module, plan: InjectionPlan, seed: int = 0) -> nn.Module:
    """Wrap every q/v projection inside the plan's targets with adapters.

    All base parameters (prompt encoder included) are flagged frozen and keep
    their exact pre-injection values; the model starts in the stage-1
    trainability state (only adapter arrays trainable). Raises on a second
    injection attempt.
    """
    if getattr(model, "lora_plan", None) is not None:
        raise ConfigurationError("model already carries injected adapters")
    generator = torch.Generator().manual_seed(seed)
    for target in VALID_TARGETS:  # fixed order keeps init draws deterministic
        if target not in plan.targets:
            continue
        root = getattr(model, target)
        for _, attn in list(iter_attention_modules(root)):
            attn.q_proj = LoraLinear(
                attn.q_proj, plan.rank, plan.init_std, plan.scale, generator
            )
            attn.v_proj = LoraLinear(
                attn.v_proj, plan.rank, plan.init_std, plan.scale, generator
            )
    model.lora_plan = plan
    model.lora_seed = seed
    model.train_stage = "lora"
    set_stage_trainability(model, "lora")
    return model


def _is_lora_param(name: str) -> bool:
    return name.endswith(".lora_A") or name.endswith(".lora_B")


def set_stage_trainability(model: nn.Module, stage: str, include_prompt_encoder: bool = True) -> None:
    """Flip requires_grad to match a training stage.

    ``lora``: exactly the adapter arrays train. ``promptable``: the image
    encoder (base and adapters) is frozen; decoder adapters train, plus the
    prompt encoder unless ``include_prompt_encoder`` is False.
    """
    if getattr(model, "lora_plan", None) is None:
        raise ConfigurationError("inject adapters before setting stage trainability")
    if stage == "lora":
        for name, p in model.named_parameters():
            p.requires_grad_(_is_lora_param(name))
    elif stage == "promptable":
        for name, p in model.named_parameters():
            if name.startswith("prompt_encoder."):
                p.requires_grad_(include_prompt_encoder)
            elif name.startswith(f"{DECODER_TARGET}.") and _is_lora_param(name):
                p.requires_grad_(True)
            else:
                p.requires_grad_(False)
    else:
        raise ConfigurationError(f"unknown stage {stage!r}; expected 'lora' or 'promptable'")
    model.train_stage = stage


def trainable_parameter_count(model: nn.Module) -> int:
    """Number of parameters the current stage will actually update."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def lora_parameter_count(model: nn.Module) -> int:
    """Closed-form count: sum of r * (d + k) over wrapped projections."""
    total = 0
    for _, mod in iter_lora_modules(model):
        total += mod.adapter.rank * (mod.adapter.d + mod.adapter.k)
    return total


def lora_state(model: nn.Module) -> List[Tuple[str, LoraLayer]]:
    """(module path, adapter) records in deterministic walk order."""
    return [(name, mod.adapter) for name, mod in iter_lora_modules(model)]
