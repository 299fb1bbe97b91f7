"""Gradient-descent training loop (momentum by default, Adam optional)."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, TrainingDivergedError
from .model import BackboneModel
from .objective import FlowSettings, LossWeights, Priors, backward, combined_loss
from .virtual import add_virtual_nodes

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e6


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    optimizer: str = "momentum"
    beta2: float = 0.999
    lr_decay: str = "cosine"
    grad_clip: float = 10.0
    n_virtual_max: int = 10
    use_uncertainty: bool = False
    self_cond_prob: float = 0.5
    precision: str = "float64"
    weights: LossWeights = field(default_factory=LossWeights)
    flow: FlowSettings = field(default_factory=FlowSettings)
    seed: int = 0
    log_every: int = 100
    max_seconds: float | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.flow, dict):
            self.flow = FlowSettings(**self.flow)
        if self.optimizer not in ("momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.lr_decay not in ("cosine", "none"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("steps/batch_size/lr out of range")

    @classmethod
    def from_dict(cls, obj):
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    """Everything needed to resume bit-for-bit."""

    step: int = 0
    velocity: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    rng_state: dict | None = None
    history: list = field(default_factory=list)
    elapsed: float = 0.0

    def to_dict(self):
        arr = lambda v: None if v is None else v.tolist()  # noqa: E731
        return {
            "step": self.step,
            "velocity": arr(self.velocity),
            "second_moment": arr(self.second_moment),
            "rng_state": self.rng_state,
            "history": self.history,
            "elapsed": self.elapsed,
        }

    @classmethod
    def from_dict(cls, obj):
        arr = lambda v: None if v is None else np.asarray(v, dtype=float)  # noqa: E731
        return cls(obj["step"], arr(obj.get("velocity")), arr(obj.get("second_moment")),
                   obj.get("rng_state"), list(obj.get("history", [])), obj.get("elapsed", 0.0))


def _lr_at(cfg: TrainConfig, step):
    if cfg.lr_decay == "cosine" and cfg.steps > 0:
        return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * min(step, cfg.steps) / cfg.steps))
    return cfg.lr


class Optimizer:
    def __init__(self, cfg: TrainConfig, n_params, state: TrainState):
        self.cfg = cfg
        self.velocity = state.velocity if state.velocity is not None else np.zeros(n_params)
        self.second = state.second_moment
        if cfg.optimizer == "adam" and self.second is None:
            self.second = np.zeros(n_params)

    def step(self, params, grad, step):
        cfg = self.cfg
        lr = _lr_at(cfg, step)
        if cfg.optimizer == "momentum":
            self.velocity = cfg.momentum * self.velocity + grad
            return params - lr * self.velocity
        self.velocity = cfg.momentum * self.velocity + (1 - cfg.momentum) * grad
        self.second = cfg.beta2 * self.second + (1 - cfg.beta2) * grad * grad
        m_hat = self.velocity / (1 - cfg.momentum ** (step + 1))
        v_hat = self.second / (1 - cfg.beta2 ** (step + 1))
        return params - lr * m_hat / (np.sqrt(v_hat) + 1e-8)


def loss_fn_default(model, molecules, rng, cfg: TrainConfig, priors: Priors):
    return combined_loss(model, molecules, rng, cfg.weights, priors, cfg.flow,
                         use_uncertainty=cfg.use_uncertainty,
                         self_cond_prob=cfg.self_cond_prob, dtype=np.dtype(cfg.precision))


def train(model: BackboneModel, dataset, cfg: TrainConfig, priors: Priors,
          state: TrainState | None = None, loss_fn=None, batch_fn=None):
    """Train ``model`` in place; returns the updated :class:`TrainState`.

    ``loss_fn(model, items, rng)`` and ``batch_fn(rng)`` let other objectives
    (alignment) reuse the loop; by default batches are drawn from ``dataset``
    with virtual nodes added and scored with the combined objective.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    state = state or TrainState()
    rng = np.random.default_rng(cfg.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    opt = Optimizer(cfg, model.n_params, state)
    vt = model.config.virtual_type

    if batch_fn is None:
        def batch_fn(r):
            idx = r.choice(len(dataset), size=min(cfg.batch_size, len(dataset)), replace=False)
            return [add_virtual_nodes(dataset[i], cfg.n_virtual_max, r, vt) for i in idx]
    if loss_fn is None:
        def loss_fn(mdl, items, r):
            return loss_fn_default(mdl, items, r, cfg, priors)

    start = time.perf_counter()
    while state.step < cfg.steps:
        if cfg.max_seconds is not None and state.elapsed + time.perf_counter() - start > cfg.max_seconds:
            log.info("time budget reached at step %d", state.step)
            break
        items = batch_fn(rng)
        total, breakdown = loss_fn(model, items, rng)
        value = breakdown["total"]
        if not np.isfinite(value) or value > DIVERGENCE_THRESHOLD:
            raise TrainingDivergedError(
                f"loss {value:.3g} at step {state.step} exceeded {DIVERGENCE_THRESHOLD:g}",
                step=state.step, loss=value)
        grad = backward(model, total)
        norm = float(np.linalg.norm(grad))
        if cfg.grad_clip and norm > cfg.grad_clip:
            grad = grad * (cfg.grad_clip / norm)
        model.params = opt.step(model.params, grad, state.step)
        record = {"step": state.step, **{k: round(v, 10) for k, v in breakdown.items()
                                          if isinstance(v, float)}}
        state.history.append(record)
        if cfg.log_every and state.step % cfg.log_every == 0:
            log.info("step %d %s", state.step, breakdown)
        state.step += 1
    state.elapsed += time.perf_counter() - start
    state.velocity = opt.velocity
    state.second_moment = opt.second
    state.rng_state = rng.bit_generator.state
    return state


def smoothed(history, key="total", window=50):
    values = np.array([h[key] for h in history], dtype=float)
    if len(values) < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")
