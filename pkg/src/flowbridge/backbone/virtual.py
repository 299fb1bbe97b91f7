"""Virtual ("no atom") nodes, node-count sampling and marginal type priors."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from ..molecule import PointCloudMolecule
from .objective import Priors


def add_virtual_nodes(sample: PointCloudMolecule, n_max: int, rng, virtual_type: int):
    """Append ``U{0..n_max}`` disconnected virtual nodes at the ligand centre of mass."""
    if n_max < 0:
        raise ConfigError("n_max must be nonnegative")
    n_virt = int(rng.integers(0, n_max + 1)) if n_max > 0 else 0
    if n_virt == 0:
        return sample
    n = sample.n_atoms
    com = sample.coords.mean(axis=0) if n else sample.context.mean(axis=0)
    coords = np.concatenate([sample.coords, np.repeat(com[None], n_virt, axis=0)])
    types = np.concatenate([sample.atom_types, np.full(n_virt, virtual_type, dtype=int)])
    bonds = np.zeros((n + n_virt, n + n_virt), dtype=int)
    bonds[:n, :n] = sample.bonds
    return sample.copy(coords=coords, atom_types=types, bonds=bonds)


def normalise_histogram(hist):
    """Accept ``{m: {N: count}}`` with string or int keys; returns int keys."""
    def count(c):
        c = float(c)
        return int(c) if c.is_integer() else c
    return {int(m): {int(n): count(c) for n, c in row.items()} for m, row in hist.items()}


def sample_size(context_size: int, histogram, n_max: int, rng):
    """Draw ``N ~ p(N | m)`` from the histogram and add ``n_max // 2`` nodes.

    Falls back to the marginal over all context sizes when ``m`` is unseen.
    """
    hist = normalise_histogram(histogram or {})
    if not hist or not any(sum(row.values()) > 0 for row in hist.values()):
        raise ConfigError("size histogram is empty")
    row = hist.get(int(context_size))
    if not row or sum(row.values()) <= 0:
        row = {}
        for r in hist.values():
            for n, c in r.items():
                row[n] = row.get(n, 0.0) + c
    sizes = np.array(sorted(row))
    probs = np.array([row[s] for s in sizes], dtype=float)
    n = int(rng.choice(sizes, p=probs / probs.sum()))
    return n + n_max // 2


def marginal_priors(molecules, n_atom_types, n_bond_types, n_max, seed=0, coord_scale=1.0):
    """Category frequencies of the training set after virtual-node augmentation."""
    rng = np.random.default_rng(seed)
    atom = np.zeros(n_atom_types)
    bond = np.zeros(n_bond_types)
    for mol in molecules:
        aug = add_virtual_nodes(mol, n_max, rng, n_atom_types - 1)
        atom += np.bincount(aug.atom_types, minlength=n_atom_types)
        iu = np.triu_indices(aug.n_atoms, 1)
        bond += np.bincount(aug.bonds[iu], minlength=n_bond_types)
    # keep every category reachable from the prior
    atom = np.maximum(atom, 1.0)
    bond = np.maximum(bond, 1.0)
    return Priors(atom / atom.sum(), bond / bond.sum(), coord_scale)
