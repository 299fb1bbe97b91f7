"""Deterministic synthetic pocket/ligand complexes and toy property oracles.

Each complex has ``m`` context points scattered on a shell around a random
centre and a ligand of ``N`` atoms grown inside the shell. The generator
builds in the couplings a model has to learn:

* ligand size grows with context size (``p(N|m)``),
* atom type is a function of the distance to the context centroid,
* bond type is a function of interatomic distance,
* atoms keep out of a clash radius around every context point,
* context torsions follow label-specific wrapped-Gaussian mixtures.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import wrap
from .molecule import PointCloudMolecule, canonical_frame_offsets

CHI_PER_LABEL = (1, 2, 3, 2)


def default_angle_modes(n_labels, n_chi):
    """Mixture table ``modes[label][slot] = (centres, weights)``."""
    table = []
    for label in range(n_labels):
        row = []
        for slot in range(n_chi):
            k = 2 + (label + slot) % 2
            offset = 0.7 * label + 1.1 * slot - 2.5
            centres = wrap(offset + 2 * np.pi * np.arange(k) / k)
            weights = [0.65, 0.35] if k == 2 else [0.5, 0.3, 0.2]
            row.append((np.atleast_1d(centres).tolist(), weights))
        table.append(row)
    return table


@dataclass
class ToyDatasetConfig:
    n_complexes: int = 2000
    m_min: int = 4
    m_max: int = 12
    n_atom_types: int = 4
    n_bond_types: int = 3
    clash_radius: float = 1.6
    pocket_radius: float = 4.0
    pocket_jitter: float = 0.3
    ligand_radius: float = 2.6
    min_atom_distance: float = 1.2
    bond_cutoff: float = 1.75
    double_bond_cutoff: float = 1.45
    n_context_labels: int = 4
    n_chi: int = 3
    angle_mode_sd: float = 0.15
    angle_modes: list = field(default=None)
    size_slope: float = 0.6
    size_offset: float = -0.4
    size_noise: float = 0.6
    n_ligand_max: int = 8
    centre_spread: float = 3.0
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_atom_types < 3:
            raise ConfigError("need at least two real atom types plus the virtual type")
        if self.n_bond_types < 2:
            raise ConfigError("need at least one bond type plus 'None'")
        if self.n_bond_types > 3:
            raise ConfigError("the toy generator emits at most two bonded types")
        if not 1 <= self.m_min <= self.m_max:
            raise ConfigError("invalid context size range")
        if self.n_complexes < 0 or self.clash_radius < 0:
            raise ConfigError("negative size or radius")
        if self.angle_modes is None:
            self.angle_modes = default_angle_modes(self.n_context_labels, self.n_chi)

    @classmethod
    def from_dict(cls, obj):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)

    @property
    def virtual_type(self):
        return self.n_atom_types - 1

    def chi_count(self, label):
        return min(CHI_PER_LABEL[label % len(CHI_PER_LABEL)], self.n_chi)


def radial_type(r, n_real_types):
    """Atom type from the distance to the context centroid."""
    edges = np.linspace(1.0, 1.8, n_real_types - 1)
    return np.searchsorted(edges, r, side="right")


def bond_type(d, cfg: ToyDatasetConfig):
    if d >= cfg.bond_cutoff:
        return 0
    if cfg.n_bond_types >= 3 and d < cfg.double_bond_cutoff:
        return 2
    return 1


def _sample_context(cfg, rng):
    m = int(rng.integers(cfg.m_min, cfg.m_max + 1))
    centre = rng.normal(0.0, cfg.centre_spread, size=3)
    dirs = rng.normal(size=(m, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = cfg.pocket_radius + rng.uniform(-cfg.pocket_jitter, cfg.pocket_jitter, size=m)
    points = centre + dirs * radii[:, None]
    labels = rng.integers(0, cfg.n_context_labels, size=m)
    return points, labels


def _sample_angles(cfg, labels, rng):
    m = len(labels)
    chi = np.zeros((m, cfg.n_chi))
    mask = np.zeros((m, cfg.n_chi), dtype=bool)
    for k, label in enumerate(labels):
        for slot in range(cfg.chi_count(label)):
            centres, weights = cfg.angle_modes[label][slot]
            mode = rng.choice(len(centres), p=np.asarray(weights) / np.sum(weights))
            chi[k, slot] = wrap(centres[mode] + cfg.angle_mode_sd * rng.standard_normal())
            mask[k, slot] = True
    return chi, mask


def _ligand_size(cfg, m, rng):
    n = np.rint(cfg.size_slope * m + cfg.size_offset + cfg.size_noise * rng.standard_normal())
    return int(np.clip(n, 2, cfg.n_ligand_max))


def _bond_length(rng):
    if rng.random() < 0.3:
        return 1.33 + 0.04 * rng.standard_normal()
    return 1.55 + 0.05 * rng.standard_normal()


def _grow_ligand(cfg, n, context, centroid, rng, counters):
    atoms = []
    tries = 0
    while len(atoms) < n:
        tries += 1
        if tries > cfg.max_retries * n:
            raise ConfigError("ligand placement infeasible; relax the clash radius or sizes")
        if not atoms:
            cand = centroid + 0.5 * rng.standard_normal(3)
        else:
            anchor = atoms[rng.integers(len(atoms))]
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            cand = anchor + _bond_length(rng) * direction
        if np.linalg.norm(cand - centroid) > cfg.ligand_radius:
            continue
        if atoms and np.min(np.linalg.norm(np.asarray(atoms) - cand, axis=1)) < cfg.min_atom_distance:
            continue
        if cfg.clash_radius > 0 and np.min(np.linalg.norm(context - cand, axis=1)) < cfg.clash_radius:
            counters["clash_rejections"] += 1
            continue
        atoms.append(cand)
    return np.asarray(atoms)


def generate_complex(cfg: ToyDatasetConfig, index: int) -> PointCloudMolecule:
    rng = np.random.default_rng([cfg.seed, index])
    context, labels = _sample_context(cfg, rng)
    centroid = context.mean(axis=0)
    chi, chi_mask = _sample_angles(cfg, labels, rng)
    n = _ligand_size(cfg, len(context), rng)
    counters = Counter()
    coords = _grow_ligand(cfg, n, context, centroid, rng, counters)
    types = radial_type(np.linalg.norm(coords - centroid, axis=1), cfg.n_atom_types - 1)
    bonds = np.zeros((n, n), dtype=int)
    for i in range(n):
        for j in range(i + 1, n):
            bonds[i, j] = bonds[j, i] = bond_type(np.linalg.norm(coords[i] - coords[j]), cfg)
    geom = np.empty((len(context), cfg.n_chi, 2))
    geom[..., 0] = 1.5
    geom[..., 1] = np.deg2rad(111.0)
    return PointCloudMolecule(
        coords=coords, atom_types=types, bonds=bonds, context=context,
        context_labels=labels, chi=chi, chi_mask=chi_mask, link_geometry=geom,
        frames=context[:, None, :] + canonical_frame_offsets()[None],
        meta={"id": index, "clash_rejections": int(counters["clash_rejections"])},
    )


def generate_dataset(cfg: ToyDatasetConfig) -> list[PointCloudMolecule]:
    return [generate_complex(cfg, i) for i in range(cfg.n_complexes)]


# -- dataset statistics -------------------------------------------------------


def size_histogram(molecules, virtual_type=None):
    """``{m: {N: count}}`` over real (non-virtual) ligand atoms."""
    hist = defaultdict(Counter)
    for mol in molecules:
        n = mol.n_atoms if virtual_type is None else int(np.sum(mol.atom_types != virtual_type))
        hist[mol.n_context][n] += 1
    return {int(m): {int(k): int(v) for k, v in sorted(c.items())} for m, c in sorted(hist.items())}


def dataset_stats(molecules, cfg: ToyDatasetConfig):
    atom_counts = np.zeros(cfg.n_atom_types, dtype=int)
    bond_counts = np.zeros(cfg.n_bond_types, dtype=int)
    for mol in molecules:
        atom_counts += np.bincount(mol.atom_types, minlength=cfg.n_atom_types)
        iu = np.triu_indices(mol.n_atoms, 1)
        bond_counts += np.bincount(mol.bonds[iu], minlength=cfg.n_bond_types)
    return {
        "n_complexes": len(molecules),
        "size_histogram": size_histogram(molecules),
        "atom_type_counts": atom_counts.tolist(),
        "bond_type_counts": bond_counts.tolist(),
        "config": cfg.to_dict(),
    }


def write_jsonl(molecules, path):
    with open(path, "w") as fh:
        for mol in molecules:
            fh.write(json.dumps(mol.to_json(), separators=(",", ":")) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [PointCloudMolecule.from_json(json.loads(line)) for line in fh if line.strip()]


# -- property oracles ------------------------------------------------------------


def radius_of_gyration(coords):
    coords = np.asarray(coords, dtype=float).reshape(-1, 3)
    if len(coords) == 0:
        return 0.0
    return float(np.sqrt(np.mean(np.sum((coords - coords.mean(0)) ** 2, axis=1))))


def type_balance(atom_types, n_real_types):
    """Entropy of the type histogram minus its maximum (0 for a uniform histogram)."""
    atom_types = np.asarray(atom_types, dtype=int)
    if len(atom_types) == 0:
        return -float(np.log(n_real_types))
    p = np.bincount(atom_types, minlength=n_real_types)[:n_real_types] / len(atom_types)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)) - np.log(n_real_types))


def clash_score(mol: PointCloudMolecule, clash_radius):
    if mol.n_atoms == 0 or mol.n_context == 0:
        return 0.0
    d = np.linalg.norm(mol.coords[:, None, :] - mol.context[None, :, :], axis=-1)
    return float(np.mean(d.min(axis=1) < clash_radius))


def property_oracles(mol: PointCloudMolecule, n_real_types=3, clash_radius=1.6):
    """Toy molecular properties; higher is better for compactness and type_balance."""
    return {
        "compactness": -radius_of_gyration(mol.coords),
        "type_balance": type_balance(mol.atom_types, n_real_types),
        "clash_score": clash_score(mol, clash_radius),
    }


ORACLE_DIRECTIONS = {"compactness": 1, "type_balance": 1, "clash_score": -1}


# -- per-molecule descriptors ------------------------------------------------------

DESCRIPTOR_COLUMNS = ("n_atoms", "radius_of_gyration", "centroid_offset", "min_context_distance")


def descriptors(mol: PointCloudMolecule):
    """Size, shape and placement of the ligand relative to its context."""
    if mol.n_atoms == 0:
        return {"n_atoms": 0.0, "radius_of_gyration": 0.0, "centroid_offset": 0.0,
                "min_context_distance": 0.0}
    centre = mol.context.mean(axis=0) if mol.n_context else np.zeros(3)
    dc = np.linalg.norm(mol.coords[:, None] - mol.context[None], axis=-1) if mol.n_context else None
    return {
        "n_atoms": float(mol.n_atoms),
        "radius_of_gyration": radius_of_gyration(mol.coords),
        "centroid_offset": float(np.linalg.norm(mol.coords.mean(axis=0) - centre)),
        "min_context_distance": float(dc.min()) if dc is not None else 0.0,
    }


def descriptor_records(molecules):
    return [descriptors(m) for m in molecules]


def atom_type_frequencies(molecules, n_types):
    counts = np.zeros(n_types)
    for mol in molecules:
        counts += np.bincount(mol.atom_types, minlength=n_types)[:n_types]
    return counts / max(counts.sum(), 1.0)


def perturb_context(mol: PointCloudMolecule, scale=1.0, shift=0.0):
    """Move context points radially about their centroid: ``r -> scale * r + shift``.

    Frames move rigidly with their point. Used to build out-of-distribution
    pockets (wider, tighter or displaced shells).
    """
    if mol.n_context == 0:
        return mol.copy()
    centre = mol.context.mean(axis=0)
    rel = mol.context - centre
    r = np.linalg.norm(rel, axis=1, keepdims=True)
    unit = np.divide(rel, r, out=np.zeros_like(rel), where=r > 0)
    moved = centre + unit * (scale * r + shift)
    delta = moved - mol.context
    return mol.copy(context=moved, frames=mol.frames + delta[:, None, :],
                    meta={**mol.meta, "context_scale": scale, "context_shift": shift})
