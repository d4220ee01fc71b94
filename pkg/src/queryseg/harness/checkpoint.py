"""Versioned checkpoint container: one .npz of named parameter arrays plus
a JSON metadata entry carrying the model config and the experiment hash."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..errors import CheckpointError
from ..model import ClusterSegmenter, ModelConfig

CHECKPOINT_VERSION = 1
META_KEY = "__meta__"

__all__ = ["save_checkpoint", "load_checkpoint", "load_model"]


def save_checkpoint(
    model: ClusterSegmenter,
    path: str | Path,
    config_hash: str,
    phase: str,
    experiment_json: str | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        name: tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()
    }
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "phase": phase,
        "model_config": {
            "grid": list(model.cfg.grid),
            "num_classes": model.cfg.num_classes,
            "num_queries": model.cfg.num_queries,
            "partition": list(model.cfg.partition),
            "embed_dim": model.cfg.embed_dim,
            "base_width": model.cfg.base_width,
            "levels": model.cfg.levels,
            "block_strides": list(model.cfg.block_strides),
            "attn_heads": model.cfg.attn_heads,
            "ffn_mult": model.cfg.ffn_mult,
        },
        "experiment_config": experiment_json,
    }
    arrays[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if META_KEY not in data:
            raise CheckpointError(f"{path} is not a model checkpoint (missing metadata)")
        meta = json.loads(str(data[META_KEY]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
        arrays = {k: data[k] for k in data.files if k != META_KEY}
    return arrays, meta


def load_model(path: str | Path) -> tuple[ClusterSegmenter, dict]:
    """Rebuild the model described by a checkpoint and load its weights."""
    arrays, meta = load_checkpoint(path)
    mc = meta["model_config"]
    cfg = ModelConfig(
        grid=tuple(mc["grid"]),
        num_classes=mc["num_classes"],
        num_queries=mc["num_queries"],
        partition=tuple(mc["partition"]),
        embed_dim=mc["embed_dim"],
        base_width=mc["base_width"],
        levels=mc["levels"],
        block_strides=tuple(mc["block_strides"]),
        attn_heads=mc["attn_heads"],
        ffn_mult=mc["ffn_mult"],
    )
    model = ClusterSegmenter(cfg)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in arrays.items()}
    try:
        model.load_state_dict(state)
    except RuntimeError as err:
        raise CheckpointError(f"checkpoint incompatible with config: {err}") from err
    model.eval()
    return model, meta
