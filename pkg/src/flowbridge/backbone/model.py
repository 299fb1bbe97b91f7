"""Small equivariant multi-head network over ligand nodes and context points.

Node states are built from type one-hots and global counts; two rounds of
messages from radial-basis distance features, plus a mean-pooled summary of
all node states, update them. Outputs:

* ``velocity`` (3 per node), a weighted sum of difference vectors, so it is
  translation invariant and rotation equivariant by construction,
* ``atom_logits`` and symmetric ``bond_logits`` for the Markov bridges,
* ``log_var`` (1 per node) for the uncertainty head,
* ``chi_velocity`` (per context torsion) from a per-point MLP on
  ``sin``/``cos`` features, masked to the torsions that exist.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import CheckpointMismatchError, ConfigError
from .autodiff import Tensor, concat, parameter


@dataclass(frozen=True)
class ModelConfig:
    n_atom_types: int = 4
    n_bond_types: int = 3
    n_context_labels: int = 4
    n_chi: int = 3
    hidden: int = 64
    pair_hidden: int = 32
    n_rbf: int = 16
    rbf_max: float = 8.0
    angle_hidden: int = 64
    n_layers: int = 2
    self_conditioning: bool = False
    max_nodes: int = 64
    max_context: int = 64

    @classmethod
    def from_dict(cls, obj):
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)

    @property
    def virtual_type(self):
        return self.n_atom_types - 1

    @property
    def global_dim(self):
        return N_TIME_FEATURES + 2 + self.n_atom_types


N_TIME_FEATURES = 4


def time_features(t):
    t = np.asarray(t, dtype=float).reshape(-1)
    return np.stack([t, np.sin(np.pi * t), np.cos(np.pi * t), (1.0 - t) ** 2], axis=-1)


def rbf(d, n_rbf, rbf_max):
    d = np.asarray(d)
    centres = np.linspace(0.0, rbf_max, n_rbf).astype(d.dtype)
    width = rbf_max / (n_rbf - 1) if n_rbf > 1 else rbf_max
    return np.exp(-0.5 * ((d[..., None] - centres) / width) ** 2)


def parameter_layout(cfg: ModelConfig):
    """Ordered ``(name, shape)`` list; fixes the flat parameter vector."""
    ka, kb, lab, c = cfg.n_atom_types, cfg.n_bond_types, cfg.n_context_labels, cfg.n_chi
    h, p, r, g, ah = cfg.hidden, cfg.pair_hidden, cfg.n_rbf, cfg.global_dim, cfg.angle_hidden
    node_in = ka * (2 if cfg.self_conditioning else 1)
    pair_extra = (kb + r) if cfg.self_conditioning else 0
    layout = [("in.w", (node_in, h)), ("in.g", (g, h)), ("in.b", (h,))]
    for i in range(cfg.n_layers):
        layout += [
            (f"l{i}.c_rbf", (r, p)), (f"l{i}.c_lab", (lab, p)), (f"l{i}.c_h", (h, p)), (f"l{i}.c_b", (p,)),
            (f"l{i}.e_rbf", (r, p)), (f"l{i}.e_bond", (kb, p)), (f"l{i}.e_h", (h, p)), (f"l{i}.e_b", (p,)),
            (f"l{i}.u_h", (h, h)), (f"l{i}.u_c", (p, h)), (f"l{i}.u_e", (p, h)),
            (f"l{i}.u_g", (g, h)), (f"l{i}.u_pool", (h, h)), (f"l{i}.u_b", (h,)),
        ]
        if pair_extra:
            layout.append((f"l{i}.e_prev", (pair_extra, p)))
    layout += [
        ("atom.w", (h, ka)), ("atom.b", (ka,)),
        ("logvar.w", (h,)), ("logvar.b", ()),
        ("bond.w", (p, kb)), ("bond.b", (kb,)),
        ("vel.ctx", (p,)), ("vel.pair", (p,)),
        ("chi.w1", (lab + 3 * c + N_TIME_FEATURES, ah)), ("chi.b1", (ah,)),
        ("chi.w2", (ah, ah)), ("chi.b2", (ah,)),
        ("chi.w3", (ah, c)), ("chi.b3", (c,)),
    ]
    return layout


@dataclass
class Batch:
    """Padded noisy state for ``B`` complexes.

    ``x`` (B,n,3), ``atoms`` (B,n,Ka) and ``bonds`` (B,n,n,Kb) one-hots,
    ``node_mask`` (B,n), ``ctx`` (B,m,3), ``ctx_labels`` (B,m,L) one-hot,
    ``ctx_mask`` (B,m), ``chi``/``chi_mask`` (B,m,C), ``t`` (B,).
    """

    x: np.ndarray
    atoms: np.ndarray
    bonds: np.ndarray
    node_mask: np.ndarray
    ctx: np.ndarray
    ctx_labels: np.ndarray
    ctx_mask: np.ndarray
    chi: np.ndarray
    chi_mask: np.ndarray
    t: np.ndarray

    @property
    def size(self):
        return self.x.shape[0]


@dataclass
class Heads:
    velocity: Tensor
    atom_logits: Tensor
    bond_logits: Tensor
    log_var: Tensor
    chi_velocity: Tensor

    def detached(self):
        return Heads(*(Tensor(getattr(self, f).data) for f in self.__dataclass_fields__))


@dataclass
class SelfCondition:
    """Previous predictions fed back as inputs (self-conditioning)."""

    atom_probs: np.ndarray
    bond_probs: np.ndarray
    x1_hat: np.ndarray

    @classmethod
    def from_heads(cls, heads: Heads, batch: Batch):
        ap = _softmax(heads.atom_logits.data)
        bp = _softmax(heads.bond_logits.data)
        x1 = batch.x + (1.0 - batch.t)[:, None, None] * heads.velocity.data
        return cls(ap, bp, x1)


def _softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


class BackboneModel:
    """Parameter store plus the forward computation graph."""

    def __init__(self, config: ModelConfig, params=None, rng=None):
        self.config = config
        self.layout = parameter_layout(config)
        self.offsets = {}
        off = 0
        for name, shape in self.layout:
            size = int(np.prod(shape)) if shape else 1
            self.offsets[name] = (off, shape, size)
            off += size
        self.n_params = off
        if params is None:
            params = self.init_params(rng if rng is not None else np.random.default_rng(0))
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise CheckpointMismatchError(
                f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params.copy()
        self._leaves = None
        self._leaf_params = None
        self._leaf_dtype = None

    def init_params(self, rng):
        flat = np.zeros(self.n_params)
        for name, (off, shape, size) in self.offsets.items():
            if len(shape) == 2:
                scale = 1.0 / np.sqrt(shape[0])
                if name in ("atom.w", "bond.w", "chi.w3"):
                    scale *= 0.1
                flat[off:off + size] = scale * rng.standard_normal(size)
            elif name in ("vel.ctx", "vel.pair", "logvar.w"):
                flat[off:off + size] = 0.01 * rng.standard_normal(size)
        return flat

    def copy(self):
        return BackboneModel(self.config, self.params)

    def view(self, name):
        off, shape, size = self.offsets[name]
        return self.params[off:off + size].reshape(shape)

    # -- gradient bookkeeping ----------------------------------------------

    def _make_leaves(self, dtype=float):
        # every recorded pass over unchanged parameters shares one set of
        # leaves, so a loss built from several forwards gets the full gradient
        dtype = np.dtype(dtype)
        if (self._leaves is not None and self._leaf_dtype == dtype
                and np.array_equal(self._leaf_params, self.params)):
            return self._leaves
        self._leaf_params = self.params.copy()
        self._leaf_dtype = dtype
        self._leaves = {name: parameter(self.view(name), dtype) for name in self.offsets}
        return self._leaves

    def zero_grad(self):
        for leaf in (self._leaves or {}).values():
            leaf.grad = None

    def flat_grad(self):
        """Concatenate the gradients accumulated on the current leaves."""
        if self._leaves is None:
            raise RuntimeError("no forward pass recorded")
        grad = np.zeros(self.n_params)
        for name, leaf in self._leaves.items():
            if leaf.grad is not None:
                off, _, size = self.offsets[name]
                grad[off:off + size] = np.asarray(leaf.grad).reshape(-1)
        return grad

    # -- forward -------------------------------------------------------------

    def check_batch(self, batch: Batch):
        cfg = self.config
        if batch.x.shape[1] > cfg.max_nodes or batch.ctx.shape[1] > cfg.max_context:
            raise ConfigError("batch exceeds the architecture's node/context maxima")
        if batch.atoms.shape[-1] != cfg.n_atom_types or batch.bonds.shape[-1] != cfg.n_bond_types:
            raise CheckpointMismatchError("category counts do not match the architecture")
        if batch.ctx_labels.shape[-1] != cfg.n_context_labels or batch.chi.shape[-1] != cfg.n_chi:
            raise CheckpointMismatchError("context label/torsion counts do not match")
        if np.any(batch.t < 0) or np.any(batch.t > 1):
            raise ConfigError("t must lie in [0, 1]")

    def forward(self, batch: Batch, prev: SelfCondition | None = None, dtype=None,
                record=None) -> Heads:
        """Run all heads in ``dtype`` (float64 by default).

        ``record`` controls whether the pass is differentiable; it defaults to
        True for float64 and False otherwise (fast inference).
        """
        self.check_batch(batch)
        cfg = self.config
        dt = np.float64 if dtype is None else np.dtype(dtype).type
        if record is None:
            record = dt == np.float64
        if record:
            P = self._make_leaves(dt)
        else:
            P = {name: Tensor(self.view(name).astype(dt)) for name in self.offsets}
        if dt != np.float64:
            batch = Batch(**{k: (v.astype(dt) if k not in ("node_mask", "ctx_mask", "chi_mask")
                                 else v) for k, v in vars(batch).items()})
            if prev is not None:
                prev = SelfCondition(*(None if a is None else a.astype(dt) for a in vars(prev).values()))
        B, n, _ = batch.x.shape
        m = batch.ctx.shape[1]

        node_mask = batch.node_mask.astype(dt)
        ctx_mask = batch.ctx_mask.astype(dt)
        nn_mask = node_mask[:, :, None] * node_mask[:, None, :] * (1.0 - np.eye(n, dtype=dt))[None]
        nc_mask = node_mask[:, :, None] * ctx_mask[:, None, :]
        n_nodes = node_mask.sum(1)
        n_ctx = ctx_mask.sum(1)
        pair_norm = np.maximum(n_nodes - 1.0, 1.0)[:, None, None]
        ctx_norm = np.maximum(n_ctx, 1.0)[:, None, None]

        counts = (batch.atoms * node_mask[..., None]).sum(1)
        g = np.concatenate([time_features(batch.t), n_nodes[:, None] / 10.0,
                            n_ctx[:, None] / 10.0, counts / 10.0], axis=1).astype(dt)

        dx_nn = batch.x[:, :, None, :] - batch.x[:, None, :, :]
        rbf_nn = rbf(np.linalg.norm(dx_nn, axis=-1), cfg.n_rbf, cfg.rbf_max).astype(dt)
        dx_nc = batch.x[:, :, None, :] - batch.ctx[:, None, :, :]
        rbf_nc = rbf(np.linalg.norm(dx_nc, axis=-1), cfg.n_rbf, cfg.rbf_max).astype(dt)

        node_in = batch.atoms
        pair_prev = None
        if cfg.self_conditioning:
            if prev is None:
                prev = SelfCondition(np.zeros_like(batch.atoms), np.zeros_like(batch.bonds),
                                     None)
                d_prev = np.zeros(batch.bonds.shape[:3] + (cfg.n_rbf,), dtype=dt)
            else:
                d1 = np.linalg.norm(prev.x1_hat[:, :, None] - prev.x1_hat[:, None], axis=-1)
                d_prev = rbf(d1, cfg.n_rbf, cfg.rbf_max).astype(dt)
            node_in = np.concatenate([batch.atoms, prev.atom_probs], axis=-1)
            pair_prev = np.concatenate([prev.bond_probs, d_prev], axis=-1)

        h = (Tensor(node_in) @ P["in.w"] + (Tensor(g) @ P["in.g"]).expand_dims(1) + P["in.b"]).silu()
        h = h * node_mask[..., None]
        labels = Tensor(batch.ctx_labels)
        for i in range(cfg.n_layers):
            c = (Tensor(rbf_nc) @ P[f"l{i}.c_rbf"]
                 + (labels @ P[f"l{i}.c_lab"]).expand_dims(1)
                 + (h @ P[f"l{i}.c_h"]).expand_dims(2)
                 + P[f"l{i}.c_b"]).silu()
            c = c * nc_mask[..., None]
            c_agg = c.sum(2) * (1.0 / ctx_norm)
            hs = h @ P[f"l{i}.e_h"]
            e_pre = (Tensor(rbf_nn) @ P[f"l{i}.e_rbf"] + Tensor(batch.bonds) @ P[f"l{i}.e_bond"]
                     + hs.expand_dims(2) + hs.expand_dims(1) + P[f"l{i}.e_b"])
            if pair_prev is not None:
                e_pre = e_pre + Tensor(pair_prev) @ P[f"l{i}.e_prev"]
            e = e_pre.silu() * nn_mask[..., None]
            e_agg = e.sum(2) * (1.0 / pair_norm)
            pooled = h.sum(1) * (1.0 / np.maximum(n_nodes, 1.0))[:, None]
            glob = Tensor(g) @ P[f"l{i}.u_g"] + pooled @ P[f"l{i}.u_pool"]
            upd = (h @ P[f"l{i}.u_h"] + c_agg @ P[f"l{i}.u_c"] + e_agg @ P[f"l{i}.u_e"]
                   + glob.expand_dims(1) + P[f"l{i}.u_b"]).silu()
            h = (h + upd) * node_mask[..., None]

        atom_logits = h @ P["atom.w"] + P["atom.b"]
        log_var = h @ P["logvar.w"] + P["logvar.b"]
        bond_logits = e @ P["bond.w"] + P["bond.b"]

        w_ctx = (c @ P["vel.ctx"]) * nc_mask
        v_ctx = (w_ctx.sum(-1, keepdims=True) * batch.x - w_ctx @ batch.ctx) * (1.0 / ctx_norm)
        w_pair = (e @ P["vel.pair"]) * nn_mask
        v_pair = (w_pair.sum(-1, keepdims=True) * batch.x - w_pair @ batch.x) * (1.0 / pair_norm)
        velocity = (v_ctx + v_pair) * node_mask[..., None]

        cm = batch.chi_mask.astype(dt)
        tf = np.broadcast_to(time_features(batch.t).astype(dt)[:, None, :], (B, m, N_TIME_FEATURES))
        chi_in = np.concatenate([batch.ctx_labels, np.sin(batch.chi) * cm,
                                 np.cos(batch.chi) * cm, cm, tf], axis=-1)
        a1 = (Tensor(chi_in) @ P["chi.w1"] + P["chi.b1"]).silu()
        a2 = (a1 @ P["chi.w2"] + P["chi.b2"]).silu()
        chi_velocity = (a2 @ P["chi.w3"] + P["chi.b3"]) * cm

        return Heads(velocity, atom_logits, bond_logits, log_var, chi_velocity)
