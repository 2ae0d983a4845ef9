"""Checkpoint archives: named float arrays plus a JSON manifest in one zip.

Archives are written with fixed member timestamps and sorted keys so that
identical contents produce identical bytes, which the determinism guarantees
rely on. Adapter checkpoints hold only the low-rank (and, after stage 2,
prompt-encoder) arrays; full checkpoints hold the complete state dict.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import torch

from .config import ModelConfig, config_hash
from .errors import CheckpointError
from .lora import InjectionPlan, inject, iter_lora_modules
from .model import PromptableSegmenter, build_model

MANIFEST_NAME = "manifest.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)

PathLike = Union[str, Path]


def write_archive(path: PathLike, arrays: Dict[str, np.ndarray], manifest: dict) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo(MANIFEST_NAME, date_time=_EPOCH)
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(
                buf, np.ascontiguousarray(arrays[name]), allow_pickle=False
            )
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())


def read_archive(path: PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    arrays: Dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path) as zf:
        names = zf.namelist()
        if MANIFEST_NAME not in names:
            raise CheckpointError(f"{path}: missing {MANIFEST_NAME}")
        manifest = json.loads(zf.read(MANIFEST_NAME))
        for name in names:
            if name == MANIFEST_NAME:
                continue
            if not name.endswith(".npy"):
                raise CheckpointError(f"{path}: unexpected archive member {name!r}")
            arrays[name[: -len(".npy")]] = np.lib.format.read_array(
                io.BytesIO(zf.read(name)), allow_pickle=False
            )
    return arrays, manifest


def read_manifest(path: PathLike) -> dict:
    with zipfile.ZipFile(path) as zf:
        if MANIFEST_NAME not in zf.namelist():
            raise CheckpointError(f"{path}: missing {MANIFEST_NAME}")
        return json.loads(zf.read(MANIFEST_NAME))


def _model_manifest(model: PromptableSegmenter) -> dict:
    return {
        "model_config": model.config.to_dict(),
        "model_seed": model.model_seed,
        "config_hash": config_hash(model.config, model.model_seed),
    }


def save_adapter(model: PromptableSegmenter, path: PathLike) -> None:
    """Write the adapter-only checkpoint (base weights are never serialized)."""
    plan = getattr(model, "lora_plan", None)
    if plan is None:
        raise CheckpointError("model has no injected adapters to save")
    arrays: Dict[str, np.ndarray] = {}
    for name, mod in iter_lora_modules(model):
        arrays[f"{name}.lora_A"] = mod.adapter.lora_A.detach().numpy()
        arrays[f"{name}.lora_B"] = mod.adapter.lora_B.detach().numpy()
    stage = getattr(model, "train_stage", "lora")
    if stage == "promptable":
        # Stage 2 also trains the prompt encoder; persist it so the
        # checkpoint restores the full stage-2 state.
        for name, p in model.prompt_encoder.named_parameters():
            arrays[f"prompt_encoder.{name}"] = p.detach().numpy()
    manifest = {
        "kind": "adapter",
        "format_version": 1,
        "stage": stage,
        "plan": plan.to_dict(),
        "lora_seed": getattr(model, "lora_seed", 0),
        **_model_manifest(model),
    }
    write_archive(path, arrays, manifest)


def load_adapter(model: PromptableSegmenter, path: PathLike) -> PromptableSegmenter:
    """Load adapter arrays into an already-injected model; validates identity."""
    plan = getattr(model, "lora_plan", None)
    if plan is None:
        raise CheckpointError("inject adapters before loading an adapter checkpoint")
    arrays, manifest = read_archive(path)
    if manifest.get("kind") != "adapter":
        raise CheckpointError(f"{path}: not an adapter checkpoint")
    expected = config_hash(model.config, model.model_seed)
    if manifest["config_hash"] != expected:
        raise CheckpointError(
            f"{path}: config hash {manifest['config_hash']} does not match "
            f"target model ({expected})"
        )
    if InjectionPlan.from_dict(manifest["plan"]) != plan:
        raise CheckpointError(f"{path}: injection plan does not match the model's")
    consumed = set()
    with torch.no_grad():
        for name, mod in iter_lora_modules(model):
            for suffix, param in (("lora_A", mod.adapter.lora_A), ("lora_B", mod.adapter.lora_B)):
                key = f"{name}.{suffix}"
                if key not in arrays:
                    raise CheckpointError(f"{path}: missing array {key}")
                param.copy_(torch.from_numpy(arrays[key]))
                consumed.add(key)
        for name, p in model.prompt_encoder.named_parameters():
            key = f"prompt_encoder.{name}"
            if key in arrays:
                p.copy_(torch.from_numpy(arrays[key]))
                consumed.add(key)
    stray = set(arrays) - consumed
    if stray:
        raise CheckpointError(f"{path}: arrays with no destination: {sorted(stray)[:3]}")
    model.train_stage = manifest.get("stage", "lora")
    return model


def save_full(model: PromptableSegmenter, path: PathLike) -> None:
    """Write a self-contained full-weight checkpoint (no adapters required)."""
    arrays = {
        name: tensor.detach().numpy()
        for name, tensor in model.state_dict().items()
    }
    manifest = {"kind": "full", "format_version": 1, **_model_manifest(model)}
    write_archive(path, arrays, manifest)


def load_full(path: PathLike) -> PromptableSegmenter:
    """Rebuild a plain model from a full-weight checkpoint."""
    arrays, manifest = read_archive(path)
    if manifest.get("kind") != "full":
        raise CheckpointError(f"{path}: not a full checkpoint")
    config = ModelConfig(**manifest["model_config"])
    model = build_model(config, manifest.get("model_seed", 0))
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state mismatch: {exc}") from exc
    return model


def export_merged(model: PromptableSegmenter) -> PromptableSegmenter:
    """Fold adapters into a fresh plain model with identical forwards."""
    if getattr(model, "lora_plan", None) is None:
        raise CheckpointError("model has no adapters to merge")
    plain = build_model(model.config, model.model_seed)
    state = dict(plain.state_dict())
    source = model.state_dict()
    wrapped = dict(iter_lora_modules(model))
    with torch.no_grad():
        for key in state:
            base_key = key
            prefix, leaf = key.rsplit(".", 1)
            if prefix in wrapped:
                if leaf == "weight":
                    state[key] = wrapped[prefix].merged_weight().detach().clone()
                    continue
                base_key = f"{prefix}.base.{leaf}"
            state[key] = source[base_key].detach().clone()
    plain.load_state_dict(state, strict=True)
    return plain
