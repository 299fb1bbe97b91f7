"""Flat-torus arithmetic, the polynomial scheduler and NERF chain building.

Angles live on ``[-pi, pi)``. All functions accept scalars or numpy arrays and
broadcast elementwise unless stated otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFrameError, DomainError

TWO_PI = 2.0 * np.pi
COLLINEAR_TOL = 1e-10


def wrap(alpha):
    """Map angles onto ``[-pi, pi)``; ``wrap(pi) == -pi``."""
    alpha = np.asarray(alpha, dtype=float)
    if not np.all(np.isfinite(alpha)):
        raise DomainError("wrap() requires finite input")
    r = np.mod(alpha + np.pi, TWO_PI)
    # np.mod can round up to exactly 2*pi for tiny negative arguments
    r = np.where(r >= TWO_PI, 0.0, r)
    # values already in range pass through untouched (no mod roundoff)
    out = np.where((alpha >= -np.pi) & (alpha < np.pi), alpha, r - np.pi)
    return float(out) if out.ndim == 0 else out


def torus_log(x, y):
    """Signed shortest displacement from ``x`` to ``y`` (tangent vector at x)."""
    d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    out = np.arctan2(np.sin(d), np.cos(d))
    return float(out) if np.ndim(out) == 0 else out


def torus_exp(x, u):
    return wrap(np.asarray(x, dtype=float) + np.asarray(u, dtype=float))


def torus_distance(x, y):
    """Geodesic distance on the flat torus (elementwise)."""
    return np.abs(torus_log(x, y))


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"time must lie in [0, 1], got {t}")
    return t


def kappa(t, k=3):
    """Polynomial scheduler ``(1 - t)**k``; exactly 1 at t=0 and 0 at t=1."""
    if int(k) != k or k < 1:
        raise DomainError(f"scheduler exponent must be a positive integer, got {k}")
    t = _check_time(t)
    out = (1.0 - t) ** int(k)
    return float(out) if out.ndim == 0 else out


def kappa_dot(t, k=3):
    """Time derivative of :func:`kappa`."""
    if int(k) != k or k < 1:
        raise DomainError(f"scheduler exponent must be a positive integer, got {k}")
    t = _check_time(t)
    out = -int(k) * (1.0 - t) ** (int(k) - 1)
    return float(out) if out.ndim == 0 else out


@dataclass
class AngleChain:
    """Torsion angles plus the fixed per-link geometry needed to place atoms.

    ``bond_lengths[j]`` is the distance from atom j to its predecessor and
    ``bond_angles[j]`` the angle at the predecessor. Masked-out torsions are
    ignored: reconstruction substitutes :data:`MASKED_TORSION` for them.
    """

    angles: np.ndarray
    mask: np.ndarray = None
    bond_lengths: np.ndarray = None
    bond_angles: np.ndarray = None

    def __post_init__(self):
        self.angles = np.atleast_1d(wrap(np.atleast_1d(np.asarray(self.angles, dtype=float))))
        n = self.angles.shape[0]
        self.mask = (np.ones(n, dtype=bool) if self.mask is None
                     else np.asarray(self.mask, dtype=bool).reshape(n))
        self.bond_lengths = (np.full(n, 1.5) if self.bond_lengths is None
                             else np.asarray(self.bond_lengths, dtype=float).reshape(n))
        self.bond_angles = (np.full(n, np.deg2rad(110.0)) if self.bond_angles is None
                            else np.asarray(self.bond_angles, dtype=float).reshape(n))
        if np.any(self.bond_lengths <= 0):
            raise DomainError("bond lengths must be positive")
        if np.any(self.bond_angles <= 0) or np.any(self.bond_angles >= np.pi):
            raise DomainError("bond angles must lie in (0, pi)")

    def __len__(self):
        return self.angles.shape[0]


MASKED_TORSION = np.pi


def _frame_axes(a, b, c):
    bc = c - b
    bc_norm = np.linalg.norm(bc, axis=-1, keepdims=True)
    ab = b - a
    ab_norm = np.linalg.norm(ab, axis=-1, keepdims=True)
    if np.any(bc_norm < COLLINEAR_TOL) or np.any(ab_norm < COLLINEAR_TOL):
        raise DegenerateFrameError("reference points must be pairwise distinct")
    bc_hat = bc / bc_norm
    n = np.cross(ab / ab_norm, bc_hat)
    n_norm = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(n_norm < COLLINEAR_TOL):
        raise DegenerateFrameError("reference points are collinear")
    n = n / n_norm
    m = np.cross(n, bc_hat)
    return bc_hat, m, n


def nerf_place_atom(a, b, c, r, theta, phi):
    """Place ``d`` with ``|d-c| = r``, angle(b,c,d) = theta, dihedral(a,b,c,d) = phi.

    Broadcasts over leading dimensions of the ``(..., 3)`` point arrays.
    """
    a, b, c = (np.asarray(p, dtype=float) for p in (a, b, c))
    r = np.asarray(r, dtype=float)[..., None]
    theta = np.asarray(theta, dtype=float)[..., None]
    phi = np.asarray(phi, dtype=float)[..., None]
    bc_hat, m, n = _frame_axes(a, b, c)
    return (c
            - r * np.cos(theta) * bc_hat
            + r * np.sin(theta) * np.cos(phi) * m
            + r * np.sin(theta) * np.sin(phi) * n)


def bond_angle(b, c, d):
    """Angle at ``c`` between ``b`` and ``d``."""
    u = np.asarray(b, dtype=float) - np.asarray(c, dtype=float)
    v = np.asarray(d, dtype=float) - np.asarray(c, dtype=float)
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    return np.arctan2(cross, np.sum(u * v, axis=-1))


def dihedral(a, b, c, d):
    """Signed dihedral angle of the four points, in ``[-pi, pi]``."""
    a, b, c, d = (np.asarray(p, dtype=float) for p in (a, b, c, d))
    b0 = a - b
    b1 = c - b
    b2 = d - c
    b1_hat = b1 / np.linalg.norm(b1, axis=-1, keepdims=True)
    v = b0 - np.sum(b0 * b1_hat, axis=-1, keepdims=True) * b1_hat
    w = b2 - np.sum(b2 * b1_hat, axis=-1, keepdims=True) * b1_hat
    x = np.sum(v * w, axis=-1)
    y = np.sum(np.cross(b1_hat, v) * w, axis=-1)
    return np.arctan2(y, x)


def chain_to_coords(chain: AngleChain, frame) -> np.ndarray:
    """Place every link of ``chain`` sequentially after the three seed points.

    Returns an ``(len(chain), 3)`` array.
    """
    frame = np.asarray(frame, dtype=float).reshape(3, 3)
    n = len(chain)
    out = np.empty((n, 3))
    if n == 0:
        return out
    torsions = np.where(chain.mask, chain.angles, MASKED_TORSION)
    a, b, c = frame
    for j in range(n):
        d = nerf_place_atom(a, b, c, chain.bond_lengths[j], chain.bond_angles[j], torsions[j])
        out[j] = d
        a, b, c = b, c, d
    return out


def chains_to_coords(angles, mask, bond_lengths, bond_angles, frames) -> np.ndarray:
    """Vectorised :func:`chain_to_coords` over a batch of equal-length chains.

    ``angles`` etc. have shape ``(..., n)``; ``frames`` has shape ``(..., 3, 3)``.
    """
    angles = np.asarray(angles, dtype=float)
    torsions = np.where(np.asarray(mask, dtype=bool), angles, MASKED_TORSION)
    frames = np.asarray(frames, dtype=float)
    n = angles.shape[-1]
    out = np.empty(angles.shape + (3,))
    a, b, c = frames[..., 0, :], frames[..., 1, :], frames[..., 2, :]
    for j in range(n):
        d = nerf_place_atom(a, b, c, bond_lengths[..., j], bond_angles[..., j], torsions[..., j])
        out[..., j, :] = d
        a, b, c = b, c, d
    return out


def coords_to_angles(points, frame) -> AngleChain:
    """Measure lengths, bond angles and torsions of points built on ``frame``."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    frame = np.asarray(frame, dtype=float).reshape(3, 3)
    if len(points) == 0:
        return AngleChain(np.zeros(0))
    full = np.concatenate([frame, points], axis=0)
    # every consecutive triple, including the trailing one, must span a plane
    _frame_axes(full[:-2], full[1:-1], full[2:])
    a, b, c, d = full[:-3], full[1:-2], full[2:-1], full[3:]
    lengths = np.linalg.norm(d - c, axis=-1)
    return AngleChain(
        angles=wrap(dihedral(a, b, c, d)),
        mask=np.ones(len(points), dtype=bool),
        bond_lengths=lengths,
        bond_angles=bond_angle(b, c, d),
    )
