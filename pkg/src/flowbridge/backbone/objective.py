"""Noisy-state draws and the training objectives.

``draw_noisy_batch`` samples one shared grid time per complex and pushes the
clean complex along every conditional path (coordinates, torsions, atom and
bond bridges). ``loss_terms`` turns network heads plus those targets into the
individual objectives; ``combined_loss`` weights and sums them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..bridges import BridgeSchedule
from ..errors import ConfigError
from ..geometry import kappa, kappa_dot, torus_log, wrap
from .autodiff import Tensor, as_tensor
from .model import Batch, BackboneModel, SelfCondition


@dataclass
class LossWeights:
    lambda_coord: float = 1.0
    lambda_chi: float = 1.0
    lambda_atom: float = 1.0
    lambda_bond: float = 1.0
    lambda_reg: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and nonnegative")


@dataclass
class Priors:
    """Prior distributions used for ``t = 0`` draws."""

    atom_probs: np.ndarray
    bond_probs: np.ndarray
    coord_scale: float = 1.0

    def to_dict(self):
        return {"atom_probs": np.asarray(self.atom_probs).tolist(),
                "bond_probs": np.asarray(self.bond_probs).tolist(),
                "coord_scale": float(self.coord_scale)}

    @classmethod
    def from_dict(cls, obj):
        return cls(np.asarray(obj["atom_probs"], dtype=float),
                   np.asarray(obj["bond_probs"], dtype=float), float(obj["coord_scale"]))

    @classmethod
    def uniform(cls, n_atom_types, n_bond_types):
        return cls(np.full(n_atom_types, 1.0 / n_atom_types),
                   np.full(n_bond_types, 1.0 / n_bond_types))


@dataclass
class FlowSettings:
    n_steps: int = 500
    torus_k: int = 3
    sigma: float = 0.0


@dataclass
class Targets:
    x0: np.ndarray
    x1: np.ndarray
    v_true: np.ndarray
    y_atoms: np.ndarray
    y_bonds: np.ndarray
    chi_target: np.ndarray
    beta: np.ndarray
    pair_mask: np.ndarray


@dataclass
class Collated:
    x1: np.ndarray
    atom_idx: np.ndarray
    bond_idx: np.ndarray
    node_mask: np.ndarray
    ctx: np.ndarray
    ctx_labels: np.ndarray
    ctx_mask: np.ndarray
    chi: np.ndarray
    chi_mask: np.ndarray


def collate(molecules, n_atom_types, n_bond_types, n_context_labels, n_chi, n_nodes=None):
    """Pad a list of complexes into fixed arrays."""
    B = len(molecules)
    n = max([mol.n_atoms for mol in molecules] + [1]) if n_nodes is None else n_nodes
    m = max([mol.n_context for mol in molecules] + [1])
    out = Collated(
        x1=np.zeros((B, n, 3)), atom_idx=np.zeros((B, n), dtype=int),
        bond_idx=np.zeros((B, n, n), dtype=int), node_mask=np.zeros((B, n), dtype=bool),
        ctx=np.zeros((B, m, 3)), ctx_labels=np.zeros((B, m, n_context_labels)),
        ctx_mask=np.zeros((B, m), dtype=bool), chi=np.zeros((B, m, n_chi)),
        chi_mask=np.zeros((B, m, n_chi), dtype=bool),
    )
    for b, mol in enumerate(molecules):
        k, c = mol.n_atoms, mol.n_context
        out.x1[b, :k] = mol.coords
        out.atom_idx[b, :k] = mol.atom_types
        out.bond_idx[b, :k, :k] = mol.bonds
        out.node_mask[b, :k] = True
        out.ctx[b, :c] = mol.context
        out.ctx_labels[b, np.arange(c), mol.context_labels] = 1.0
        out.ctx_mask[b, :c] = True
        cc = min(mol.chi.shape[1], n_chi)
        out.chi[b, :c, :cc] = mol.chi[:, :cc]
        out.chi_mask[b, :c, :cc] = mol.chi_mask[:, :cc]
    return out


def upper_pair_mask(node_mask):
    nm = node_mask.astype(float)
    n = nm.shape[1]
    return nm[:, :, None] * nm[:, None, :] * np.triu(np.ones((n, n)), 1)[None]


def symmetrize_pairs(idx):
    """Mirror the strict upper triangle of integer pair labels; zero diagonal."""
    n = idx.shape[-1]
    upper = np.triu(np.ones((n, n), dtype=bool), 1)
    sym = np.where(upper, idx, 0)
    return sym + np.swapaxes(sym, -1, -2)


def context_centroid(col: Collated):
    w = col.ctx_mask.astype(float)[..., None]
    return (col.ctx * w).sum(1) / np.maximum(w.sum(1), 1.0)


def draw_prior(col: Collated, priors: Priors, rng):
    """Prior draws: Gaussian coordinates around the context centroid,
    categorical types and bonds, uniform torsions."""
    B, n = col.node_mask.shape
    x0 = context_centroid(col)[:, None, :] + priors.coord_scale * rng.standard_normal((B, n, 3))
    a0 = rng.choice(len(priors.atom_probs), size=(B, n), p=priors.atom_probs)
    e0 = symmetrize_pairs(rng.choice(len(priors.bond_probs), size=(B, n, n), p=priors.bond_probs))
    chi0 = rng.uniform(-np.pi, np.pi, size=col.chi.shape)
    return x0, a0, e0, chi0


def draw_noisy_batch(col: Collated, priors: Priors, flow: FlowSettings, rng, t_index=None):
    """Sample ``(Batch, Targets)`` along all conditional paths.

    ``t_index`` (one grid index per complex) overrides the uniform draw.
    """
    B, n = col.node_mask.shape
    N = flow.n_steps
    schedule = BridgeSchedule(N)
    if t_index is None:
        t_index = rng.integers(0, N, size=B)
    t_index = np.broadcast_to(np.asarray(t_index, dtype=int), (B,))
    t = t_index / N
    x0, a0, e0, chi0 = draw_prior(col, priors, rng)

    tb = t[:, None, None]
    x_t = tb * col.x1 + (1.0 - tb) * x0
    if flow.sigma > 0:
        x_t = x_t + flow.sigma * rng.standard_normal(x_t.shape)
    v_true = col.x1 - x0

    beta_bar = np.asarray(schedule.beta_bar(t - schedule.dt))
    keep_a = rng.random((B, n)) < beta_bar[:, None]
    a_t = np.where(keep_a, a0, col.atom_idx)
    keep_e = rng.random((B, n, n)) < beta_bar[:, None, None]
    e_t = symmetrize_pairs(np.where(keep_e, e0, col.bond_idx))

    shift = torus_log(chi0, col.chi)
    chi_t = wrap(chi0 + (1.0 - kappa(t, flow.torus_k))[:, None, None] * shift)
    chi_target = -kappa_dot(t, flow.torus_k)[:, None, None] * shift
    chi_target = chi_target * col.chi_mask
    chi_t = np.where(col.chi_mask, chi_t, 0.0)

    eye_a = np.eye(len(priors.atom_probs))
    eye_b = np.eye(len(priors.bond_probs))
    batch = Batch(
        x=x_t, atoms=eye_a[a_t], bonds=eye_b[e_t], node_mask=col.node_mask,
        ctx=col.ctx, ctx_labels=col.ctx_labels, ctx_mask=col.ctx_mask,
        chi=chi_t, chi_mask=col.chi_mask, t=t,
    )
    targets = Targets(
        x0=x0, x1=col.x1, v_true=v_true, y_atoms=eye_a[col.atom_idx],
        y_bonds=eye_b[col.bond_idx], chi_target=chi_target,
        beta=np.asarray([schedule.beta(s) for s in t]), pair_mask=upper_pair_mask(col.node_mask),
    )
    return batch, targets


# -- individual objectives ---------------------------------------------------


def fm_ood_loss(v_pred, v_true, log_var, lambda_reg):
    """Gaussian negative log-likelihood of the true field plus a variance prior.

    ``(d/2) log s2 + |v_pred - v_true|^2 / (2 s2) + (lambda/2)(s2 - 1)^2`` with
    ``s2 = exp(log_var)`` and ``d`` the size of the last axis. Works on plain
    arrays (returns floats/arrays) or on :class:`Tensor` inputs (returns a
    Tensor), elementwise over leading axes.
    """
    tensor_mode = any(isinstance(v, Tensor) for v in (v_pred, log_var))
    v_pred, log_var = as_tensor(v_pred), as_tensor(log_var)
    v_true = np.asarray(v_true, dtype=float)
    if v_pred.shape != v_true.shape:
        raise ValueError("v_pred and v_true must have the same shape")
    d = v_true.shape[-1] if v_true.ndim else 1
    sq = (v_pred - v_true).square().sum(-1) if v_true.ndim else (v_pred - v_true).square()
    s2 = log_var.exp()
    out = log_var * (0.5 * d) + sq * s2.reciprocal() * 0.5 + (s2 - 1.0).square() * (0.5 * lambda_reg)
    if tensor_mode:
        return out
    return float(out.data) if out.data.ndim == 0 else out.data


def masked_item_mean(values: Tensor, mask: np.ndarray):
    """Per-complex mean over all but the batch axis, restricted to ``mask``.

    Complexes with an empty mask contribute 0.
    """
    mask = mask.astype(float)
    axes = tuple(range(1, mask.ndim))
    denom = mask.sum(axis=axes)
    weight = np.where(denom > 0, 1.0 / np.maximum(denom, 1.0), 0.0)
    return (values * mask).sum(axis=axes) * weight


def bridge_kl(logits: Tensor, z_t: np.ndarray, y: np.ndarray, beta: np.ndarray, n_steps: int):
    """``N * KL(p(z_{t+dt}|z_t,y) || q(z_{t+dt}|z_t))`` elementwise over leading axes."""
    from ..bridges import LOG_EPS

    b = beta.reshape((-1,) + (1,) * (z_t.ndim - 1))
    p = b * z_t + (1.0 - b) * y
    q = logits.softmax(-1) * (1.0 - b) + b * z_t
    const = np.where(p > 0, p * np.log(np.maximum(p, LOG_EPS)), 0.0).sum(-1)
    cross = (q.log(floor=LOG_EPS) * p).sum(-1)
    return (cross * -1.0 + const) * float(n_steps)


def item_losses(heads, batch: Batch, targets: Targets, n_steps: int,
                use_uncertainty=False, lambda_reg=10.0):
    """Per-domain losses for each complex (Tensors of shape ``(B,)``)."""
    node_mask = batch.node_mask
    if use_uncertainty:
        per_node = fm_ood_loss(heads.velocity, targets.v_true, heads.log_var, lambda_reg)
    else:
        per_node = (heads.velocity - targets.v_true).square().sum(-1)
    chi_err = (heads.chi_velocity - targets.chi_target).square()
    atom_kl = bridge_kl(heads.atom_logits, batch.atoms, targets.y_atoms, targets.beta, n_steps)
    bond_kl = bridge_kl(heads.bond_logits, batch.bonds, targets.y_bonds, targets.beta, n_steps)
    return {
        "coord": masked_item_mean(per_node, node_mask),
        "chi": masked_item_mean(chi_err, batch.chi_mask),
        "atom": masked_item_mean(atom_kl, node_mask),
        "bond": masked_item_mean(bond_kl, targets.pair_mask),
    }


def loss_terms(heads, batch: Batch, targets: Targets, n_steps: int,
               use_uncertainty=False, lambda_reg=10.0):
    """Per-domain losses, each a scalar Tensor averaged over the batch."""
    items = item_losses(heads, batch, targets, n_steps, use_uncertainty, lambda_reg)
    scale = 1.0 / batch.size
    return {k: v.sum() * scale for k, v in items.items()}


def weighted_total(terms, weights: LossWeights, domains=("coord", "chi", "atom", "bond")):
    lam = {"coord": weights.lambda_coord, "chi": weights.lambda_chi,
           "atom": weights.lambda_atom, "bond": weights.lambda_bond}
    total = None
    for name in domains:
        part = terms[name] * lam[name]
        total = part if total is None else total + part
    return total


def model_heads(model: BackboneModel, batch: Batch, rng=None, self_cond_prob=0.5, dtype=None):
    """Forward pass, with self-conditioning applied with probability ``self_cond_prob``.

    The self-conditioning pass is an input only, so it runs without a graph.
    """
    prev = None
    if model.config.self_conditioning and rng is not None and rng.random() < self_cond_prob:
        prev = SelfCondition.from_heads(model.forward(batch, dtype=np.float32, record=False), batch)
    return model.forward(batch, prev, dtype=dtype, record=True)


def combined_loss(model: BackboneModel, molecules, rng, weights: LossWeights, priors: Priors,
                  flow: FlowSettings = FlowSettings(), use_uncertainty=False, t_index=None,
                  self_cond_prob=0.5, dtype=None):
    """Weighted sum of coordinate, torsion, atom and bond objectives.

    Returns ``(total Tensor, breakdown dict of floats)``.
    """
    cfg = model.config
    col = collate(molecules, cfg.n_atom_types, cfg.n_bond_types, cfg.n_context_labels, cfg.n_chi)
    batch, targets = draw_noisy_batch(col, priors, flow, rng, t_index=t_index)
    heads = model_heads(model, batch, rng, self_cond_prob, dtype)
    terms = loss_terms(heads, batch, targets, flow.n_steps, use_uncertainty, weights.lambda_reg)
    total = weighted_total(terms, weights)
    breakdown = {k: float(v.data) for k, v in terms.items()}
    breakdown["total"] = float(total.data)
    return total, breakdown


def backward(model: BackboneModel, loss: Tensor):
    """Gradient of ``loss`` with respect to the model's flat parameter vector."""
    model.zero_grad()
    loss.backward()
    return model.flat_grad()
