"""Conditional probability paths and vector fields for Euclidean and torus flows.

Euclidean coordinates follow the straight Gaussian path
``x_t = t*x1 + (1-t)*x0 + sigma*eps`` whose conditional field is the constant
``x1 - x0``. Torsions follow the geodesic on the flat torus with the
polynomial scheduler ``kappa(t) = (1-t)**k`` controlling how fast the geodesic
distance to the endpoint shrinks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid

from .errors import DimensionError, DomainError, IntegrationDivergedError
from .geometry import kappa, kappa_dot, torus_exp, torus_log, wrap


@dataclass(frozen=True)
class EuclideanFlowConfig:
    sigma: float = 0.0
    n_steps: int = 500

    def __post_init__(self):
        if not self.sigma >= 0:
            raise DomainError("sigma must be nonnegative")
        if self.n_steps < 1:
            raise DomainError("n_steps must be >= 1")


@dataclass(frozen=True)
class TorusFlowConfig:
    k: int = 3
    n_steps: int = 500

    def __post_init__(self):
        if self.k < 1:
            raise DomainError("scheduler exponent k must be >= 1")
        if self.n_steps < 1:
            raise DomainError("n_steps must be >= 1")


@dataclass
class Trajectory:
    times: np.ndarray
    states: list = field(default_factory=list)
    per_step_variance: list = field(default_factory=list)

    @property
    def final(self):
        return self.states[-1]


def _pair(x0, x1):
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if x0.shape != x1.shape:
        raise DimensionError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    return x0, x1


def euclid_path_sample(x0, x1, t, sigma=0.0, rng=None):
    """Draw ``x_t`` from the Gaussian conditional path."""
    x0, x1 = _pair(x0, x1)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    mean = t * x1 + (1.0 - t) * x0
    if sigma == 0:
        return mean
    if rng is None:
        raise ValueError("an rng is required when sigma > 0")
    return mean + sigma * rng.standard_normal(mean.shape)


def euclid_target_field(x0, x1):
    x0, x1 = _pair(x0, x1)
    return x1 - x0


def torus_path(x0, x1, t, k=3):
    """Point at time ``t`` on the scheduled geodesic from ``x0`` to ``x1``."""
    x0, x1 = _pair(x0, x1)
    return torus_exp(x0, (1.0 - kappa(t, k)) * torus_log(x0, x1))


def torus_target_field(x0, x1, t, k=3):
    """Conditional velocity ``-kappa'(t) * log_{x0}(x1)`` (tangent vector)."""
    x0, x1 = _pair(x0, x1)
    return -kappa_dot(t, k) * torus_log(x0, x1)


def time_grid(n_steps):
    if n_steps < 1:
        raise DomainError("n_steps must be >= 1")
    return np.arange(n_steps + 1) / n_steps


def integrate_ode(state0, field_fn: Callable, n_steps: int, torus_mask=None) -> Trajectory:
    """Explicit Euler integration on the uniform grid over ``[0, 1]``.

    ``field_fn(state, t)`` returns either a velocity array or a tuple
    ``(velocity, variance)``. Entries flagged by ``torus_mask`` are wrapped
    back onto ``[-pi, pi)`` after every step. When the field reports a
    variance it is also evaluated once at ``t=1`` so the variance record
    covers the closed interval.
    """
    if n_steps < 1:
        raise DomainError("n_steps must be >= 1")
    times = time_grid(n_steps)
    dt = 1.0 / n_steps
    state = np.array(state0, dtype=float, copy=True)
    if torus_mask is not None:
        torus_mask = np.broadcast_to(np.asarray(torus_mask, dtype=bool), state.shape)
    traj = Trajectory(times=times, states=[state.copy()])
    for i in range(n_steps):
        out = field_fn(state, times[i])
        if isinstance(out, tuple):
            velocity, variance = out
            traj.per_step_variance.append(np.asarray(variance, dtype=float))
        else:
            velocity = out
        state = state + dt * np.asarray(velocity, dtype=float)
        if not np.all(np.isfinite(state)):
            raise IntegrationDivergedError(f"non-finite state at t={times[i + 1]:.4f}")
        if torus_mask is not None and torus_mask.any():
            state = np.where(torus_mask, wrap(state), state)
        traj.states.append(state.copy())
    if traj.per_step_variance:
        _, variance = field_fn(state, 1.0)
        traj.per_step_variance.append(np.asarray(variance, dtype=float))
    return traj


def sigma_tot(trajectory: Trajectory):
    """Square root of the trapezoidal integral of the recorded variances."""
    if not trajectory.per_step_variance:
        raise ValueError("trajectory carries no variance record")
    var = np.asarray(trajectory.per_step_variance, dtype=float)
    times = np.asarray(trajectory.times, dtype=float)[: len(var)]
    out = np.sqrt(np.maximum(trapezoid(var, times, axis=0), 0.0))
    return float(out) if out.ndim == 0 else out


def integrate_sde(state0, field_fn: Callable, n_steps: int, rng) -> Trajectory:
    """Euler-Maruyama diagnostic for ``dx = v dt + sigma dB``.

    ``field_fn`` must return ``(velocity, variance)``. Only used to check that
    the spread of endpoints matches the integrated variance; generation itself
    is deterministic given the prior draw.
    """
    times = time_grid(n_steps)
    dt = 1.0 / n_steps
    state = np.array(state0, dtype=float, copy=True)
    traj = Trajectory(times=times, states=[state.copy()])
    for i in range(n_steps):
        velocity, variance = field_fn(state, times[i])
        noise = rng.standard_normal(state.shape)
        state = state + dt * velocity + np.sqrt(variance * dt) * noise
        if not np.all(np.isfinite(state)):
            raise IntegrationDivergedError(f"non-finite state at t={times[i + 1]:.4f}")
        traj.per_step_variance.append(np.asarray(variance, dtype=float))
        traj.states.append(state.copy())
    traj.per_step_variance.append(np.asarray(field_fn(state, 1.0)[1], dtype=float))
    return traj
