"""Joint generation: Euler flow for coordinates and torsions, Markov bridges
for atom and bond types, all on one shared time grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from ..bridges import BridgeSchedule, sample_categorical, step_probs
from ..errors import ConfigError, IntegrationDivergedError
from ..geometry import wrap
from ..molecule import PointCloudMolecule, strip_virtual
from .model import Batch, BackboneModel, SelfCondition, _softmax
from .objective import FlowSettings, Priors, collate, draw_prior, symmetrize_pairs


@dataclass
class Generated:
    """A generated complex after virtual-node removal.

    ``sigma_tot`` has one entry per surviving atom; ``removed`` counts the
    stripped virtual nodes.
    """

    molecule: PointCloudMolecule
    sigma_tot: np.ndarray
    removed: int


def _placeholder(context_mol: PointCloudMolecule, n_nodes):
    return context_mol.copy(coords=np.zeros((n_nodes, 3)), atom_types=np.zeros(n_nodes, dtype=int),
                            bonds=np.zeros((n_nodes, n_nodes), dtype=int))


def _sample_pairs(probs, rng):
    return symmetrize_pairs(sample_categorical(probs, rng))


def generate_batch(model: BackboneModel, contexts, n_nodes, rng, priors: Priors,
                   flow: FlowSettings = FlowSettings(), fixed_ligand=None, dtype=np.float32):
    """Generate one ligand (and context torsions) per entry of ``contexts``.

    ``n_nodes[b]`` is the number of computational nodes for complex ``b``.
    With ``fixed_ligand`` (a list of complexes with known ligands) the
    ligand variables follow their true conditional fields and transition
    probabilities, so only the torsions are generated by the model.
    Network passes run in ``dtype`` (float32 by default, for speed); the
    state itself is kept in float64.
    """
    cfg = model.config
    n_nodes = [int(k) for k in n_nodes]
    if len(n_nodes) != len(contexts):
        raise ConfigError("need one node count per context")
    if fixed_ligand is not None:
        templates = list(fixed_ligand)
        n_nodes = [mol.n_atoms for mol in templates]
    else:
        templates = [_placeholder(c, k) for c, k in zip(contexts, n_nodes)]
    col = collate(templates, cfg.n_atom_types, cfg.n_bond_types, cfg.n_context_labels, cfg.n_chi)
    B, n = col.node_mask.shape
    N = flow.n_steps
    schedule = BridgeSchedule(N)
    dt = schedule.dt
    eye_a, eye_b = np.eye(cfg.n_atom_types), np.eye(cfg.n_bond_types)

    x, a_idx, e_idx, chi = draw_prior(col, priors, rng)
    chi = np.where(col.chi_mask, chi, 0.0)
    x0 = x.copy()
    node_mask = col.node_mask
    upper = np.triu(np.ones((n, n), dtype=bool), 1)[None] & node_mask[:, :, None] & node_mask[:, None, :]
    variances = []
    prev = None

    def state(t):
        return Batch(x=x, atoms=eye_a[a_idx], bonds=eye_b[e_idx], node_mask=node_mask,
                     ctx=col.ctx, ctx_labels=col.ctx_labels, ctx_mask=col.ctx_mask,
                     chi=chi, chi_mask=col.chi_mask, t=np.full(B, t))

    for i in range(N):
        t = i / N
        batch = state(t)
        heads = model.forward(batch, prev, dtype=dtype)
        if cfg.self_conditioning:
            prev = SelfCondition.from_heads(heads, batch)
        variances.append(np.exp(heads.log_var.data))
        beta = schedule.beta(t)
        if fixed_ligand is None:
            v = heads.velocity.data
            y_a = _softmax(heads.atom_logits.data)
            y_b = _softmax(heads.bond_logits.data)
        else:
            v = col.x1 - x0
            y_a = eye_a[col.atom_idx]
            y_b = eye_b[col.bond_idx]
        x = x + dt * v * node_mask[..., None]
        chi = np.where(col.chi_mask, wrap(chi + dt * heads.chi_velocity.data), 0.0)
        a_idx = np.where(node_mask, sample_categorical(step_probs(eye_a[a_idx], y_a, beta), rng), 0)
        e_new = _sample_pairs(step_probs(eye_b[e_idx], y_b, beta), rng)
        e_idx = np.where(upper | np.swapaxes(upper, 1, 2), e_new, 0)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(chi))):
            raise IntegrationDivergedError(f"non-finite state at t={t:.4f}")
    heads = model.forward(state(1.0), prev, dtype=dtype)
    variances.append(np.exp(heads.log_var.data))
    sigma = np.sqrt(trapezoid(np.stack(variances), dx=dt, axis=0))

    out = []
    for b, tmpl in enumerate(templates):
        k = n_nodes[b]
        types = a_idx[b, :k].copy()
        bonds = e_idx[b, :k, :k].copy()
        # virtual nodes are disconnected by definition
        virt = types == cfg.virtual_type
        bonds[virt, :] = 0
        bonds[:, virt] = 0
        mc = tmpl.n_context
        cc = min(tmpl.chi.shape[1], cfg.n_chi)
        new_chi = tmpl.chi.copy()
        new_chi[:, :cc] = np.where(tmpl.chi_mask[:, :cc], chi[b, :mc, :cc], 0.0)
        full = tmpl.copy(coords=x[b, :k].copy(), atom_types=types, bonds=bonds, chi=new_chi,
                         meta={**tmpl.meta, "n_nodes": k})
        mol, removed = strip_virtual(full, cfg.virtual_type)
        out.append(Generated(mol, sigma[b, :k][~virt], removed))
    return out


def generate(model: BackboneModel, contexts, n_nodes, rng, priors: Priors,
             flow: FlowSettings = FlowSettings(), fixed_ligand=None, chunk=128,
             dtype=np.float32):
    """:func:`generate_batch` over chunks of at most ``chunk`` complexes.

    Complexes are grouped by node count to keep padding small; results come
    back in input order.
    """
    if len(n_nodes) != len(contexts):
        raise ConfigError("need one node count per context")
    sizes = n_nodes if fixed_ligand is None else [mol.n_atoms for mol in fixed_ligand]
    order = np.argsort(np.asarray(sizes, dtype=int), kind="stable")
    out = [None] * len(contexts)
    for s in range(0, len(order), chunk):
        idx = order[s:s + chunk]
        fl = None if fixed_ligand is None else [fixed_ligand[i] for i in idx]
        res = generate_batch(model, [contexts[i] for i in idx], [n_nodes[i] for i in idx], rng,
                             priors, flow, fl, dtype)
        for i, r in zip(idx, res):
            out[i] = r
    return out
