"""Checkpoint persistence for :class:`EncoderPair` (safetensors container)."""

from __future__ import annotations

import json
from pathlib import Path

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file

from .encoders import EncoderPair, LayerDescriptor, build_encoder

FORMAT_VERSION = "1"
REQUIRED_FIELDS = (
    "format_version",
    "embed_dim",
    "normalization_mode",
    "logit_scale",
    "layer_catalog",
    "visual_type",
    "visual_config",
    "textual_type",
    "textual_config",
)


class CheckpointFormatError(ValueError):
    """The file is not a readable checkpoint; ``field`` names the offending part."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def save_checkpoint(pair: EncoderPair, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {name: p.detach().contiguous().clone() for name, p in pair.named_parameters()}
    metadata = {
        "format_version": FORMAT_VERSION,
        "embed_dim": str(pair.embed_dim),
        "normalization_mode": pair.normalization_mode,
        "logit_scale": repr(pair.logit_scale),
        "layer_catalog": json.dumps([d.to_dict() for d in pair.layer_catalog]),
        "visual_type": type(pair.visual).__name__,
        "visual_config": json.dumps(pair.visual.config()),
        "textual_type": type(pair.textual).__name__,
        "textual_config": json.dumps(pair.textual.config()),
    }
    save_file(tensors, str(path), metadata=metadata)
    return path


def _read(path: Path):
    try:
        with safe_open(str(path), framework="pt") as f:
            metadata = f.metadata() or {}
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except (SafetensorError, OSError, ValueError, RuntimeError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise CheckpointFormatError("container", f"cannot parse {path}: {exc}") from exc
    return metadata, tensors


def load_checkpoint(path) -> EncoderPair:
    path = Path(path)
    metadata, tensors = _read(path)
    for key in REQUIRED_FIELDS:
        if key not in metadata:
            raise CheckpointFormatError(key, "missing from checkpoint metadata")
    if metadata["format_version"] != FORMAT_VERSION:
        raise CheckpointFormatError("format_version", f"unsupported version {metadata['format_version']!r}")
    try:
        catalog = [LayerDescriptor(**d) for d in json.loads(metadata["layer_catalog"])]
    except (TypeError, ValueError) as exc:
        raise CheckpointFormatError("layer_catalog", str(exc)) from exc
    parsed = {}
    for key in ("visual_config", "textual_config"):
        try:
            parsed[key] = json.loads(metadata[key])
        except ValueError as exc:
            raise CheckpointFormatError(key, str(exc)) from exc
    try:
        visual = build_encoder(metadata["visual_type"], parsed["visual_config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointFormatError("visual_type", str(exc)) from exc
    try:
        textual = build_encoder(metadata["textual_type"], parsed["textual_config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointFormatError("textual_type", str(exc)) from exc
    try:
        pair = EncoderPair(
            visual,
            textual,
            int(metadata["embed_dim"]),
            normalization_mode=metadata["normalization_mode"],
            logit_scale=float(metadata["logit_scale"]),
            eligible={d.name: d.eligible for d in catalog},
        )
    except ValueError as exc:
        raise CheckpointFormatError("normalization_mode", str(exc)) from exc
    params = pair.layer_params()
    if [d.name for d in catalog] != list(params):
        raise CheckpointFormatError("layer_catalog", "layer names do not match the architecture")
    with torch.no_grad():
        for name, p in params.items():
            if name not in tensors:
                raise CheckpointFormatError(name, "tensor missing")
            if tensors[name].shape != p.shape:
                raise CheckpointFormatError(name, f"shape {tuple(tensors[name].shape)} != {tuple(p.shape)}")
            p.copy_(tensors[name].to(p.dtype))
    pair.layer_catalog = catalog
    return pair
