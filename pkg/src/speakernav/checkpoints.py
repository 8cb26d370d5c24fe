"""Model <-> checkpoint file."""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .errors import IncompatibleCheckpointError
from .fileio import config_hash, load_checkpoint, save_checkpoint
from .follower import FollowerConfig, FollowerModel
from .nn import Module
from .speaker import SpeakerConfig, SpeakerModel
from .vocab import Vocab


def param_arrays(model: Module) -> dict:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def load_params(model: Module, arrays: dict) -> None:
    named = dict(model.named_parameters())
    if set(named) != set(arrays):
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        raise IncompatibleCheckpointError(f"parameter names differ (missing {missing[:3]}, extra {extra[:3]})")
    for name, p in named.items():
        if p.data.shape != arrays[name].shape:
            raise IncompatibleCheckpointError(
                f"{name}: shape {arrays[name].shape} does not match model {p.data.shape}")
        p.data[...] = arrays[name]


def _save(path, kind, model, provenance):
    config = model.config.to_dict()
    prov = dict(provenance or {})
    prov.setdefault("config_hash", config_hash(config))
    return save_checkpoint(path, kind, config, model.vocab.itos, param_arrays(model), prov)


def _load(path, kind):
    ckpt = load_checkpoint(path)
    if ckpt["kind"] != kind:
        raise IncompatibleCheckpointError(f"{path}: holds a {ckpt['kind']} model, expected {kind}")
    return ckpt


def save_speaker(path, model: SpeakerModel, provenance: Optional[dict] = None):
    return _save(path, "speaker", model, provenance)


def load_speaker(path) -> Tuple[SpeakerModel, dict]:
    ckpt = _load(path, "speaker")
    model = SpeakerModel(SpeakerConfig.from_dict(ckpt["config"]), Vocab(ckpt["vocab"]))
    load_params(model, ckpt["arrays"])
    return model, ckpt


def save_follower(path, model: FollowerModel, provenance: Optional[dict] = None):
    return _save(path, "follower", model, provenance)


def load_follower(path) -> Tuple[FollowerModel, dict]:
    ckpt = _load(path, "follower")
    model = FollowerModel(FollowerConfig(**ckpt["config"]), Vocab(ckpt["vocab"]))
    load_params(model, ckpt["arrays"])
    return model, ckpt
