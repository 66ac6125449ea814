# hdafl/checkpoint.py
"""
Checkpoint container: one torch.save file holding a JSON manifest string,
the named parameter tensors and (optionally) the optimizer state.

Manifest keys: format, tensors (name / shape / dtype), head_config,
train_config, config_hash, epoch, episode, sampler_state.
"""
from __future__ import annotations

import hashlib
import json
import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import torch

from hdafl.errors import LoadError, ValidationError
from hdafl.model import HDAFLHead, HeadConfig

FORMAT = "hdafl-checkpoint/1"


def config_hash(*configs: Optional[Dict[str, Any]]) -> str:
    blob = json.dumps([c or {} for c in configs], sort_keys=True, default=str)
    return hashlib.md5(blob.encode()).hexdigest()


def _dtype_from_name(name: str) -> torch.dtype:
    dtype = getattr(torch, name.replace("torch.", ""), None)
    if not isinstance(dtype, torch.dtype):
        raise ValidationError(f"unknown tensor dtype {name!r} in checkpoint manifest")
    return dtype


@dataclass
class Checkpoint:
    model: HDAFLHead
    manifest: Dict[str, Any]
    optimizer_state: Optional[Dict[str, Any]] = None
    path: Optional[Path] = field(default=None)

    @property
    def epoch(self) -> int:
        return int(self.manifest.get("epoch", 0))

    @property
    def episode(self) -> int:
        return int(self.manifest.get("episode", 0))

    @property
    def epoch_offset(self) -> int:
        """Episodes already run inside the unfinished epoch `epoch` (0 at an epoch boundary)."""
        return int(self.manifest.get("epoch_offset", 0))

    @property
    def sampler_state(self) -> Optional[Dict[str, Any]]:
        return self.manifest.get("sampler_state")

    @property
    def train_config(self) -> Dict[str, Any]:
        return self.manifest.get("train_config") or {}


def save_checkpoint(
    path,
    model: HDAFLHead,
    optimizer: Optional[torch.optim.Optimizer] = None,
    epoch: int = 0,
    episode: int = 0,
    epoch_offset: int = 0,
    sampler_state: Optional[Dict[str, Any]] = None,
    train_config: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    tensors = {name: t.detach().cpu().clone() for name, t in model.state_dict().items()}
    head_config = model.config.to_dict()
    manifest = {
        "format": FORMAT,
        "tensors": [
            {"name": name, "shape": list(t.shape), "dtype": str(t.dtype)} for name, t in tensors.items()
        ],
        "head_config": head_config,
        "train_config": train_config,
        "config_hash": config_hash(head_config, train_config),
        "epoch": int(epoch),
        "episode": int(episode),
        "epoch_offset": int(epoch_offset),
        "sampler_state": sampler_state,
    }
    payload = {
        "manifest": json.dumps(manifest, sort_keys=True),
        "tensors": tensors,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }

    # Write then rename so a crash never leaves a truncated checkpoint behind
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    logging.info("Saved checkpoint %s (epoch %d, episode %d)", path, epoch, episode)
    return path


def load_checkpoint(path, map_location: str = "cpu") -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
        manifest = json.loads(payload["manifest"])
    except (OSError, RuntimeError, KeyError, ValueError, EOFError, pickle.UnpicklingError) as e:
        raise LoadError(f"unreadable checkpoint {path}: {e}") from e

    if manifest.get("format") != FORMAT:
        raise ValidationError(f"{path} is not a {FORMAT} container (format={manifest.get('format')!r})")

    tensors: Dict[str, torch.Tensor] = payload["tensors"]
    for entry in manifest["tensors"]:
        t = tensors.get(entry["name"])
        if t is None:
            raise ValidationError(f"checkpoint manifest lists {entry['name']} but the tensor is missing")
        if list(t.shape) != entry["shape"] or str(t.dtype) != entry["dtype"]:
            raise ValidationError(f"tensor {entry['name']} does not match its manifest entry")

    head_config = HeadConfig.from_dict(manifest["head_config"])
    dtypes = {e["dtype"] for e in manifest["tensors"]}
    dtype = _dtype_from_name(sorted(dtypes)[0]) if dtypes else torch.float32
    model = HDAFLHead.build(head_config, seed=0, dtype=dtype)
    model.load_state_dict(tensors, strict=True)
    model.eval()
    return Checkpoint(model=model, manifest=manifest, optimizer_state=payload.get("optimizer"), path=path)
