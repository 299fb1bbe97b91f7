"""Preference pairs, the multi-domain preference loss, and the alignment /
fine-tuning loops built on the backbone trainer."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone.model import BackboneModel
from .backbone.objective import (FlowSettings, LossWeights, Priors, collate,
                                 draw_noisy_batch, item_losses, model_heads, weighted_total)
from .backbone.sampling import generate
from .backbone.train import TrainConfig, TrainState, train
from .backbone.virtual import add_virtual_nodes
from .errors import ConfigError
from .molecule import PointCloudMolecule

log = logging.getLogger(__name__)

PREFERENCE_DOMAINS = ("coord", "atom", "bond")


class NoPairsWarning(UserWarning):
    """A context produced no qualifying preference pair."""


@dataclass
class PreferencePair:
    winner: PointCloudMolecule
    loser: PointCloudMolecule
    context_id: object
    winner_props: dict
    loser_props: dict

    def to_json(self):
        return {"context_id": self.context_id, "winner": self.winner.to_json(),
                "loser": self.loser.to_json(), "winner_props": self.winner_props,
                "loser_props": self.loser_props}

    @classmethod
    def from_json(cls, obj):
        return cls(PointCloudMolecule.from_json(obj["winner"]), PointCloudMolecule.from_json(obj["loser"]),
                   obj["context_id"], obj["winner_props"], obj["loser_props"])


def write_pairs(pairs, path):
    with open(path, "w") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_json(), separators=(",", ":")) + "\n")


def read_pairs(path):
    with open(path) as fh:
        return [PreferencePair.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass
class AlignmentConfig:
    beta: float = 100.0
    lambda_coord: float = 1.0
    lambda_atom: float = 0.5
    lambda_bond: float = 0.5
    lambda_w: float = 1.0
    lambda_l: float = 0.2
    lambda_mdpa: float = 1.0
    thresholds: dict = field(default_factory=dict)
    steps: int = 500
    batch_size: int = 16
    lr: float = 3e-4
    optimizer: str = "adam"
    momentum: float = 0.9
    n_virtual_max: int = 10
    use_uncertainty: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    flow: FlowSettings = field(default_factory=FlowSettings)
    val_every: int = 0
    val_size: int = 32
    val_steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.flow, dict):
            self.flow = FlowSettings(**self.flow)
        scalars = (self.beta, self.lambda_coord, self.lambda_atom, self.lambda_bond,
                   self.lambda_w, self.lambda_l, self.lambda_mdpa)
        if not all(np.isfinite(v) and v >= 0 for v in scalars):
            raise ConfigError("alignment weights must be finite and nonnegative")
        if any(v < 0 for v in self.thresholds.values()):
            raise ConfigError("thresholds must be nonnegative")

    @classmethod
    def from_dict(cls, obj):
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown alignment config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)

    def train_config(self):
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                           optimizer=self.optimizer, momentum=self.momentum, lr_decay="none",
                           n_virtual_max=self.n_virtual_max, use_uncertainty=self.use_uncertainty,
                           weights=self.weights, flow=self.flow, seed=self.seed, log_every=0)


# -- pair construction ----------------------------------------------------------


def _beats(pw, pl, names, directions, thresholds):
    return all(directions.get(k, 1) * (pw[k] - pl[k]) > thresholds.get(k, 0.0) for k in names)


def pairs_from_samples(samples, props, context_id, names, directions, thresholds):
    """All ordered pairs in one context where the first beats the second on
    every property in ``names`` by more than its threshold."""
    out = []
    for i in range(len(samples)):
        for j in range(len(samples)):
            if i != j and _beats(props[i], props[j], names, directions, thresholds):
                out.append(PreferencePair(samples[i], samples[j], context_id, props[i], props[j]))
    return out


def build_preference_dataset(ref_model: BackboneModel, contexts, property_oracle, thresholds,
                             rng, priors: Priors, size_fn, samples_per_context=4,
                             directions=None, flow: FlowSettings = FlowSettings(), max_pairs_per_context=None):
    """Sample from the reference model per context and pair up the samples.

    ``property_oracle(mol) -> {name: value}``; ``thresholds`` names the
    properties that must all improve (several names = combined mode);
    ``directions[name]`` is +1 when higher is better and -1 otherwise.
    ``size_fn(context, rng)`` returns the node count per sample.
    """
    directions = dict(directions or {})
    names = list(thresholds)
    if not names:
        raise ConfigError("at least one property threshold is required")
    flat = [c for c in contexts for _ in range(samples_per_context)]
    sizes = [size_fn(c, rng) for c in flat]
    generated = generate(ref_model, flat, sizes, rng, priors, flow)
    pairs = []
    for k, ctx in enumerate(contexts):
        group = [g.molecule for g in generated[k * samples_per_context:(k + 1) * samples_per_context]]
        group = [g for g in group if g.n_atoms > 0]
        props = [property_oracle(g) for g in group]
        cid = ctx.meta.get("id", k)
        found = pairs_from_samples(group, props, cid, names, directions, thresholds)
        if not found:
            warnings.warn(f"context {cid}: no qualifying preference pair", NoPairsWarning)
            continue
        if max_pairs_per_context is not None and len(found) > max_pairs_per_context:
            keep = rng.choice(len(found), size=max_pairs_per_context, replace=False)
            found = [found[i] for i in sorted(keep)]
        pairs.extend(found)
    return pairs


# -- losses ---------------------------------------------------------------------------


def _draw(model, molecules, priors, flow, rng, t_index):
    cfg = model.config
    col = collate(molecules, cfg.n_atom_types, cfg.n_bond_types, cfg.n_context_labels, cfg.n_chi)
    return draw_noisy_batch(col, priors, flow, rng, t_index=t_index)


def _domain_losses(model, batch, targets, cfg: AlignmentConfig, rng, detach=False):
    heads = model_heads(model, batch, rng)
    if detach:
        heads = heads.detached()
    plain = item_losses(heads, batch, targets, cfg.flow.n_steps, False)
    if cfg.use_uncertainty:
        full = item_losses(heads, batch, targets, cfg.flow.n_steps, True, cfg.weights.lambda_reg)
    else:
        full = plain
    return plain, full


def _regularizer(full, cfg: AlignmentConfig, n):
    total = weighted_total(full, cfg.weights)
    return total.sum() * (1.0 / n)


def finetune_loss(model, winners, rng, cfg: AlignmentConfig, priors: Priors, t_index=None):
    """``lambda_w`` times the training objective on the winning samples."""
    n = len(winners)
    if t_index is None:
        t_index = rng.integers(0, cfg.flow.n_steps, size=n)
    batch, targets = _draw(model, winners, priors, cfg.flow, rng, t_index)
    _, full = _domain_losses(model, batch, targets, cfg, rng)
    reg = _regularizer(full, cfg, n)
    total = reg * cfg.lambda_w
    return total, {"winner": float(reg.data), "total": float(total.data)}


def mdpa_loss(model, ref_model, winners, losers, rng, cfg: AlignmentConfig, priors: Priors,
              t_index=None):
    """Multi-domain preference loss for a batch of (winner, loser) pairs.

    Each pair shares one time; the aligned and the frozen reference model see
    identical noisy states. Returns ``(Tensor, breakdown)``; the breakdown
    includes the per-pair sigmoid argument under ``"margin"``.
    """
    n = len(winners)
    if len(losers) != n:
        raise ConfigError("winners and losers must pair up")
    if model.config != ref_model.config:
        raise ConfigError("aligned and reference models must share the architecture")
    if t_index is None:
        t_index = rng.integers(0, cfg.flow.n_steps, size=n)
    t_index = np.broadcast_to(np.asarray(t_index, dtype=int), (n,))
    t = t_index / cfg.flow.n_steps
    lam = {"coord": cfg.lambda_coord, "atom": cfg.lambda_atom, "bond": cfg.lambda_bond}

    batch_w, targ_w = _draw(model, winners, priors, cfg.flow, rng, t_index)
    plain_w, full_w = _domain_losses(model, batch_w, targ_w, cfg, rng)
    reg_w = _regularizer(full_w, cfg, n)
    total = reg_w * cfg.lambda_w
    breakdown = {"winner": float(reg_w.data)}

    need_losers = cfg.lambda_mdpa > 0 or cfg.lambda_l > 0
    if need_losers:
        batch_l, targ_l = _draw(model, losers, priors, cfg.flow, rng, t_index)
        plain_l, full_l = _domain_losses(model, batch_l, targ_l, cfg, rng)
        if cfg.lambda_l > 0:
            reg_l = _regularizer(full_l, cfg, n)
            total = total + reg_l * cfg.lambda_l
            breakdown["loser"] = float(reg_l.data)
    if cfg.lambda_mdpa > 0:
        ref_w, _ = _domain_losses(ref_model, batch_w, targ_w, cfg, rng, detach=True)
        ref_l, _ = _domain_losses(ref_model, batch_l, targ_l, cfg, rng, detach=True)
        inner = None
        for c in PREFERENCE_DOMAINS:
            diff = (plain_w[c] - ref_w[c].data) - (plain_l[c] - ref_l[c].data)
            part = diff * lam[c]
            inner = part if inner is None else inner + part
        margin = inner * (-cfg.beta * t)
        pref = margin.log_sigmoid().sum() * (-1.0 / n)
        total = total + pref * cfg.lambda_mdpa
        breakdown["preference"] = float(pref.data)
        breakdown["margin"] = margin.data.tolist()
    breakdown["total"] = float(total.data)
    return total, breakdown


# -- training loops --------------------------------------------------------------------


def structural_validity(mol: PointCloudMolecule, min_atom_distance=0.7, min_context_distance=1.0,
                        max_bond_length=2.2):
    """Toy validity: nonempty, no overlapping atoms, no atom inside a context
    point, and every bonded pair at a plausible distance."""
    if mol.n_atoms == 0:
        return False
    d = np.linalg.norm(mol.coords[:, None] - mol.coords[None], axis=-1)
    if mol.n_atoms > 1 and np.min(d + np.eye(mol.n_atoms) * 1e9) < min_atom_distance:
        return False
    if mol.n_context:
        dc = np.linalg.norm(mol.coords[:, None] - mol.context[None], axis=-1)
        if np.min(dc) < min_context_distance:
            return False
    bonded = mol.bonds > 0
    return not np.any(d[bonded] > max_bond_length)


def validity_rate(model, contexts, sizes, priors, cfg: AlignmentConfig, seed=0):
    rng = np.random.default_rng(seed)
    flow = FlowSettings(cfg.val_steps, cfg.flow.torus_k, cfg.flow.sigma)
    out = generate(model, contexts, sizes, rng, priors, flow)
    return float(np.mean([structural_validity(g.molecule) for g in out]))


def _augment(mols, cfg, rng, vt):
    return [add_virtual_nodes(m, cfg.n_virtual_max, rng, vt) for m in mols]


def _run(model, items, loss_fn, cfg: AlignmentConfig, priors, val=None):
    """Train in chunks of ``val_every`` steps, keeping the most valid checkpoint."""
    tcfg = cfg.train_config()
    state = TrainState()
    best = None
    if not cfg.val_every or val is None:
        state = train(model, items, tcfg, priors, state, loss_fn=loss_fn[0], batch_fn=loss_fn[1])
        return model, state, None
    contexts, sizes = val
    history = []
    while state.step < cfg.steps:
        tcfg.steps = min(state.step + cfg.val_every, cfg.steps)
        state = train(model, items, tcfg, priors, state, loss_fn=loss_fn[0], batch_fn=loss_fn[1])
        rate = validity_rate(model, contexts, sizes, priors, cfg)
        history.append({"step": state.step, "validity": rate})
        if best is None or rate > best[0]:
            best = (rate, model.params.copy(), state.step)
    model.params = best[1]
    return model, state, {"history": history, "selected_step": best[2], "validity": best[0]}


def align(ref_model: BackboneModel, pairs, cfg: AlignmentConfig, priors: Priors, val=None):
    """Copy of ``ref_model`` trained on the preference loss.

    ``val=(contexts, sizes)`` enables validity-based checkpoint selection
    every ``cfg.val_every`` steps. Returns ``(model, state, selection)``.
    """
    if not pairs:
        raise ConfigError("no preference pairs")
    model = ref_model.copy()
    frozen = ref_model.copy()
    vt = model.config.virtual_type

    def batch_fn(rng):
        idx = rng.choice(len(pairs), size=min(cfg.batch_size, len(pairs)), replace=False)
        w = _augment([pairs[i].winner for i in idx], cfg, rng, vt)
        lo = _augment([pairs[i].loser for i in idx], cfg, rng, vt)
        return w, lo

    def loss_fn(mdl, items, rng):
        return mdpa_loss(mdl, frozen, items[0], items[1], rng, cfg, priors)

    return _run(model, pairs, (loss_fn, batch_fn), cfg, priors, val)


def finetune(ref_model: BackboneModel, winners, cfg: AlignmentConfig, priors: Priors, val=None):
    """Copy of ``ref_model`` trained on the winners with the standard objective."""
    if not winners:
        raise ConfigError("no winning samples")
    model = ref_model.copy()
    vt = model.config.virtual_type

    def batch_fn(rng):
        idx = rng.choice(len(winners), size=min(cfg.batch_size, len(winners)), replace=False)
        w = _augment([winners[i] for i in idx], cfg, rng, vt)
        _augment([winners[i] for i in idx], cfg, rng, vt)  # mirror the loser draw of align
        return w

    def loss_fn(mdl, items, rng):
        return finetune_loss(mdl, items, rng, cfg, priors)

    return _run(model, winners, (loss_fn, batch_fn), cfg, priors, val)
