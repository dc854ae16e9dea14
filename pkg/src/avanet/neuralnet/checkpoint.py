"""Lossless model checkpoints.

A checkpoint is a single ``.npz`` archive holding a JSON metadata record
(format version, model configuration, parameter order, optimizer settings,
step counter) plus one array per parameter and, when training with Adam,
one pair of moment arrays per parameter. Arrays round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .layers import ParameterSet
from .model import ModelConfig
from .optim import AdamState, OptimizerConfig
from .tensor import Tensor

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: ParameterSet
    step: int
    optimizer_cfg: OptimizerConfig | None = None
    adam_state: AdamState | None = None


def save_checkpoint(path, model_cfg: ModelConfig, params: ParameterSet, step: int,
                    optimizer_cfg: OptimizerConfig | None = None,
                    adam_state: AdamState | None = None) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "model": json.loads(model_cfg.to_json()),
        "param_names": params.names(),
        "step": int(step),
        "optimizer": None if optimizer_cfg is None else vars(optimizer_cfg).copy(),
        "has_adam_state": adam_state is not None,
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    for name, tensor in params:
        arrays[f"param::{name}"] = tensor.data
    if adam_state is not None:
        for name, _ in params:
            arrays[f"adam_m::{name}"] = adam_state.m[name]
            arrays[f"adam_v::{name}"] = adam_state.v[name]
    np.savez(path, **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format {meta.get('format_version')!r}"
            )
        model_cfg = ModelConfig.from_json(json.dumps(meta["model"]))
        params = ParameterSet()
        for name in meta["param_names"]:
            params.register(name, Tensor(archive[f"param::{name}"]))
        opt_cfg = None
        if meta["optimizer"] is not None:
            opt_cfg = OptimizerConfig(**meta["optimizer"])
        adam_state = None
        if meta["has_adam_state"]:
            adam_state = AdamState(
                m={name: archive[f"adam_m::{name}"] for name in meta["param_names"]},
                v={name: archive[f"adam_v::{name}"] for name in meta["param_names"]},
            )
    return Checkpoint(
        model_cfg=model_cfg,
        params=params,
        step=meta["step"],
        optimizer_cfg=opt_cfg,
        adam_state=adam_state,
    )
