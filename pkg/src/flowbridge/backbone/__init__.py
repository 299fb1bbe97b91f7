"""Differentiable backbone: model, objectives, training and generation."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import Batch, BackboneModel, Heads, ModelConfig, SelfCondition
from .objective import (FlowSettings, LossWeights, Priors, backward, collate, combined_loss,
                        draw_noisy_batch, fm_ood_loss, loss_terms)
from .sampling import Generated, generate, generate_batch
from .train import TrainConfig, TrainState, train
from .virtual import add_virtual_nodes, marginal_priors, sample_size

__all__ = [
    "Batch", "BackboneModel", "Checkpoint", "FlowSettings", "Generated", "Heads", "LossWeights",
    "ModelConfig", "Priors", "SelfCondition", "TrainConfig", "TrainState", "add_virtual_nodes",
    "backward", "collate", "combined_loss", "draw_noisy_batch", "fm_ood_loss", "generate",
    "generate_batch", "load_checkpoint", "loss_terms", "marginal_priors", "sample_size",
    "save_checkpoint", "train",
]
