"""Point-cloud complexes: a ligand graph plus its context ("pocket") points."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .geometry import AngleChain, chains_to_coords


@dataclass
class PointCloudMolecule:
    """Ligand coordinates, atom/bond categories and the surrounding context.

    ``atom_types`` index ``K_a`` categories whose last entry is the virtual
    ("no atom") type; ``bonds`` index ``K_b`` categories with 0 meaning no
    bond. Each context point carries a label and a chain of up to ``C``
    torsions (``chi``/``chi_mask``) with fixed link geometry
    (``link_geometry[..., 0]`` lengths, ``[..., 1]`` bond angles) anchored
    on a three-point seed ``frames``.
    """

    coords: np.ndarray
    atom_types: np.ndarray
    bonds: np.ndarray
    context: np.ndarray
    context_labels: np.ndarray
    chi: np.ndarray = None
    chi_mask: np.ndarray = None
    link_geometry: np.ndarray = None
    frames: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 3)
        self.atom_types = np.asarray(self.atom_types, dtype=int).reshape(-1)
        n = len(self.coords)
        self.bonds = np.asarray(self.bonds, dtype=int).reshape(n, n)
        self.context = np.asarray(self.context, dtype=float).reshape(-1, 3)
        self.context_labels = np.asarray(self.context_labels, dtype=int).reshape(-1)
        m = len(self.context)
        if self.chi is None:
            self.chi = np.zeros((m, 0))
        chi = np.asarray(self.chi, dtype=float)
        self.chi = chi if chi.ndim == 2 and len(chi) == m else chi.reshape(m, -1 if m else 0)
        c = self.chi.shape[1]
        self.chi_mask = (np.zeros((m, c), dtype=bool) if self.chi_mask is None
                         else np.asarray(self.chi_mask, dtype=bool).reshape(m, c))
        if self.link_geometry is None:
            geom = np.empty((m, c, 2))
            geom[..., 0] = 1.5
            geom[..., 1] = np.deg2rad(110.0)
            self.link_geometry = geom
        self.link_geometry = np.asarray(self.link_geometry, dtype=float).reshape(m, c, 2)
        if self.frames is None:
            self.frames = self.context[:, None, :] + canonical_frame_offsets()[None]
        self.frames = np.asarray(self.frames, dtype=float).reshape(m, 3, 3)

    @property
    def n_atoms(self):
        return len(self.coords)

    @property
    def n_context(self):
        return len(self.context)

    def angle_chain(self, k) -> AngleChain:
        return AngleChain(self.chi[k], self.chi_mask[k],
                          self.link_geometry[k, :, 0], self.link_geometry[k, :, 1])

    def side_chain_coords(self):
        """NERF placement of every context side chain, shape ``(m, C, 3)``."""
        return chains_to_coords(self.chi, self.chi_mask, self.link_geometry[..., 0],
                                self.link_geometry[..., 1], self.frames)

    def copy(self, **changes):
        base = {
            "coords": self.coords.copy(), "atom_types": self.atom_types.copy(),
            "bonds": self.bonds.copy(), "context": self.context.copy(),
            "context_labels": self.context_labels.copy(), "chi": self.chi.copy(),
            "chi_mask": self.chi_mask.copy(), "link_geometry": self.link_geometry.copy(),
            "frames": self.frames.copy(), "meta": dict(self.meta),
        }
        base.update(changes)
        return replace(self, **base)

    def translated(self, shift):
        shift = np.asarray(shift, dtype=float).reshape(3)
        return self.copy(coords=self.coords + shift, context=self.context + shift,
                         frames=self.frames + shift)

    def validate(self, n_atom_types, n_bond_types, n_max=None):
        """Raise :class:`ConfigError` if structural invariants are broken."""
        n = self.n_atoms
        if n_max is not None and n > n_max:
            raise ConfigError(f"{n} nodes exceed the maximum of {n_max}")
        if np.any(self.atom_types < 0) or np.any(self.atom_types >= n_atom_types):
            raise ConfigError("atom type index out of range")
        if np.any(self.bonds < 0) or np.any(self.bonds >= n_bond_types):
            raise ConfigError("bond type index out of range")
        if not np.array_equal(self.bonds, self.bonds.T):
            raise ConfigError("bond matrix must be symmetric")
        if n and np.any(np.diag(self.bonds) != 0):
            raise ConfigError("bond matrix must have an empty diagonal")
        virtual = self.atom_types == n_atom_types - 1
        if np.any(self.bonds[virtual] != 0):
            raise ConfigError("virtual nodes must be disconnected")
        if not (np.all(np.isfinite(self.coords)) and np.all(np.isfinite(self.context))):
            raise ConfigError("non-finite coordinates")

    # -- serialisation -----------------------------------------------------

    def to_json(self):
        iu, ju = np.nonzero(np.triu(self.bonds, 1))
        return {
            "coords": self.coords.tolist(),
            "atom_types": self.atom_types.tolist(),
            "bonds": [[int(i), int(j), int(self.bonds[i, j])] for i, j in zip(iu, ju)],
            "context": self.context.tolist(),
            "context_labels": self.context_labels.tolist(),
            "chi": self.chi.tolist(),
            "chi_mask": self.chi_mask.astype(int).tolist(),
            "link_geometry": self.link_geometry.tolist(),
            "frames": self.frames.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj):
        n = len(obj["atom_types"])
        bonds = np.zeros((n, n), dtype=int)
        for i, j, b in obj.get("bonds", []):
            bonds[i, j] = bonds[j, i] = b
        m = len(obj["context_labels"])
        return cls(
            coords=np.asarray(obj["coords"], dtype=float).reshape(n, 3),
            atom_types=obj["atom_types"],
            bonds=bonds,
            context=np.asarray(obj["context"], dtype=float).reshape(m, 3),
            context_labels=obj["context_labels"],
            chi=np.asarray(obj.get("chi", [[]] * m), dtype=float),
            chi_mask=np.asarray(obj.get("chi_mask", [[]] * m), dtype=bool),
            link_geometry=obj.get("link_geometry"),
            frames=obj.get("frames"),
            meta=obj.get("meta", {}),
        )


def canonical_frame_offsets():
    """Seed frame offsets relative to a context point (non-collinear)."""
    return np.array([[-1.2, 0.8, 0.0], [-1.0, -0.5, 0.0], [0.0, 0.0, 0.0]])


def strip_virtual(mol: PointCloudMolecule, virtual_type):
    """Drop virtual nodes (and their bonds); returns ``(molecule, n_removed)``."""
    keep = mol.atom_types != virtual_type
    removed = int(np.sum(~keep))
    out = mol.copy(coords=mol.coords[keep], atom_types=mol.atom_types[keep],
                   bonds=mol.bonds[np.ix_(keep, keep)])
    return out, removed
