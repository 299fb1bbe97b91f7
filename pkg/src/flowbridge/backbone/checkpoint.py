"""Versioned JSON checkpoints: architecture, parameters, priors, size histogram."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import CheckpointMismatchError, ConfigError
from .model import BackboneModel, ModelConfig
from .objective import Priors
from .virtual import normalise_histogram

FORMAT = "flowbridge-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    model: BackboneModel
    priors: Priors
    size_histogram: dict
    n_virtual_max: int = 10
    train_config: dict = field(default_factory=dict)
    train_state: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "format": FORMAT,
            "version": VERSION,
            "architecture": self.model.config.to_dict(),
            "n_params": self.model.n_params,
            "params": self.model.params.tolist(),
            "priors": self.priors.to_dict(),
            "size_histogram": {str(m): {str(k): v for k, v in row.items()}
                               for m, row in self.size_histogram.items()},
            "n_virtual_max": self.n_virtual_max,
            "train_config": self.train_config,
            "train_state": self.train_state,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, obj):
        if obj.get("format") != FORMAT:
            raise CheckpointMismatchError("not a flowbridge checkpoint")
        if obj.get("version") != VERSION:
            raise CheckpointMismatchError(f"unsupported checkpoint version {obj.get('version')}")
        try:
            config = ModelConfig.from_dict(obj["architecture"])
        except (ConfigError, TypeError) as exc:
            raise CheckpointMismatchError(f"unknown architecture: {exc}") from exc
        params = np.asarray(obj["params"], dtype=float)
        model = BackboneModel(config, params)
        if model.n_params != obj.get("n_params", model.n_params):
            raise CheckpointMismatchError("parameter count does not match the architecture")
        return cls(model, Priors.from_dict(obj["priors"]),
                   normalise_histogram(obj["size_histogram"]), int(obj.get("n_virtual_max", 10)),
                   obj.get("train_config", {}), obj.get("train_state"), obj.get("extra", {}))


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "w") as fh:
        json.dump(ckpt.to_dict(), fh)


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointMismatchError(f"unreadable checkpoint: {exc}") from exc
    return Checkpoint.from_dict(obj)
