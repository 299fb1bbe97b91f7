"""Markov bridge for categorical variables (atom and bond types).

A chain ``z_0, z_dt, ..., z_1`` is pinned at both ends: it starts from a prior
draw and is absorbed into the data category ``y``. Each step applies the
column-stochastic kernel ``Q_t(y) = beta_t I + (1 - beta_t) y 1^T``.

Grid conventions (``dt = 1/N``):

* steps happen at ``t in {0, dt, ..., 1 - dt}`` and move ``z_t`` to ``z_{t+dt}``;
* the marginal of ``z_t`` given both ends uses ``beta_bar(t - dt)`` with
  ``beta_bar(-dt) = 1``, so ``z_0`` and ``z_dt`` both equal the start state;
* ``beta_bar(s) = 1 - s`` on the grid except at the final step, where it is
  pinned to 0 so every chain lands on ``y`` exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError

LOG_EPS = 1e-12
LOSS_CAP = 1e6


class CappedLossWarning(RuntimeWarning):
    """The bridge loss hit zero support in the prediction and was capped."""


def one_hot(index, k):
    index = np.asarray(index, dtype=int)
    if np.any(index < 0) or np.any(index >= k):
        raise DomainError(f"category index out of range for K={k}")
    return np.eye(k)[index]


def check_categorical(probs, atol=1e-9):
    probs = np.asarray(probs, dtype=float)
    if probs.shape[-1] < 2:
        raise DomainError("a categorical needs at least two categories")
    if np.any(probs < -atol) or not np.allclose(probs.sum(-1), 1.0, atol=atol):
        raise DomainError("probabilities must be nonnegative and sum to one")
    return probs


def _check_one_hot(z):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] < 2 or not (np.all((z == 0) | (z == 1)) and np.all(z.sum(-1) == 1)):
        raise DomainError("expected a one-hot vector")
    return z


def sample_categorical(probs, rng):
    """Draw indices from the rows of ``probs`` by inverse-CDF sampling."""
    probs = np.asarray(probs, dtype=float)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    idx = np.sum(cdf <= u, axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


@dataclass(frozen=True)
class BridgeSchedule:
    """Linear ``beta_bar(t) = 1 - t`` schedule on an ``N``-step grid."""

    n_steps: int = 500

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise DomainError("n_steps must be a positive integer")

    @property
    def dt(self):
        return 1.0 / self.n_steps

    def grid_index(self, t):
        """Integer grid index of ``t``; raises if ``t`` is off the grid."""
        t = np.asarray(t, dtype=float)
        scaled = t * self.n_steps
        idx = np.rint(scaled)
        if np.any(np.abs(scaled - idx) > 1e-6) or np.any(idx < -1) or np.any(idx > self.n_steps):
            raise DomainError(f"t={t} is not on the {self.n_steps}-step grid")
        return idx.astype(int)

    def beta_bar(self, t):
        """Cumulative retention probability at grid time ``t`` (``t >= -dt``)."""
        i = self.grid_index(t)
        out = np.where(i < 0, 1.0, 1.0 - i / self.n_steps)
        out = np.where(i >= self.n_steps - 1, 0.0, out)
        return float(out) if out.ndim == 0 else out

    def beta(self, t):
        """One-step retention ``beta_bar(t) / beta_bar(t - dt)`` for a step at ``t``."""
        i = self.grid_index(t)
        if np.any(i < 0) or np.any(i >= self.n_steps):
            raise DomainError("steps are taken at t in {0, ..., 1 - dt}")
        num = np.asarray(self.beta_bar(t))
        den = np.asarray(self.beta_bar(np.asarray(t) - self.dt))
        out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        return float(out) if out.ndim == 0 else out

    def step_times(self):
        return np.arange(self.n_steps) / self.n_steps


def transition_matrix(y, beta_t):
    """``beta_t I + (1 - beta_t) y 1^T`` for a one-hot ``y`` of size K."""
    y = _check_one_hot(y)
    if not 0.0 <= beta_t <= 1.0:
        raise DomainError(f"beta_t must lie in [0, 1], got {beta_t}")
    k = y.shape[-1]
    return beta_t * np.eye(k) + (1.0 - beta_t) * np.outer(y, np.ones(k))


def cumulative_matrix(y, beta_bar_t):
    return transition_matrix(y, beta_bar_t)


def bridge_marginal(z0, y, t, schedule: BridgeSchedule):
    """Closed-form ``p(z_t | z_0, z_1 = y)`` as a probability vector.

    Vectorised over leading dimensions of ``z0`` / ``y``.
    """
    z0 = _check_one_hot(z0)
    y = _check_one_hot(y)
    if z0.shape != y.shape:
        raise DimensionError("z0 and y must have the same shape")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise DomainError("t must lie in [0, 1]")
    bb = np.asarray(schedule.beta_bar(t_arr - schedule.dt))[..., None]
    return bb * z0 + (1.0 - bb) * y


def step_probs(z_t, y_probs, beta_t):
    """Next-state distribution ``beta_t z_t + (1 - beta_t) y``.

    With a one-hot ``y`` this is ``Q_t(y) z_t``; with a predicted distribution
    over ``y`` it is the kernel averaged over that prediction.
    """
    beta_t = np.asarray(beta_t, dtype=float)
    if beta_t.ndim:
        beta_t = beta_t[..., None]
    return beta_t * np.asarray(z_t, dtype=float) + (1.0 - beta_t) * np.asarray(y_probs, dtype=float)


def bridge_step_sample(z_t, y, t, schedule: BridgeSchedule, rng):
    """Sample ``z_{t+dt}`` from ``Cat(Q_t(y) z_t)``; returns one-hot."""
    z_t = _check_one_hot(z_t)
    y = np.asarray(y, dtype=float)
    beta_t = schedule.beta(t)
    probs = step_probs(z_t, y, beta_t)
    return one_hot(sample_categorical(probs, rng), z_t.shape[-1])


def _kl_terms(p_true, q_pred):
    p_true = np.asarray(p_true, dtype=float)
    q_pred = np.asarray(q_pred, dtype=float)
    log_p = np.log(np.maximum(p_true, LOG_EPS))
    log_q = np.log(np.maximum(q_pred, LOG_EPS))
    return np.where(p_true > 0, p_true * (log_p - log_q), 0.0)


def mbm_loss(predicted_y_probs, z_t, y_true, t, schedule: BridgeSchedule):
    """``N * KL(p(z_{t+dt} | z_t, y) || q(z_{t+dt} | z_t))`` for one variable.

    ``q`` is the transition kernel averaged over the predicted endpoint
    distribution. Zero predicted support where the true kernel has mass
    triggers :class:`CappedLossWarning` and the value is capped at 1e6.
    """
    pred = check_categorical(predicted_y_probs)
    z_t = _check_one_hot(z_t)
    y_true = _check_one_hot(y_true)
    if not pred.shape == z_t.shape == y_true.shape:
        raise DimensionError("predicted, z_t and y_true must share a shape")
    beta_t = schedule.beta(t)
    p = step_probs(z_t, y_true, beta_t)
    q = step_probs(z_t, pred, beta_t)
    value = schedule.n_steps * float(np.sum(_kl_terms(p, q)))
    if np.any((p > 0) & (q <= 0)):
        warnings.warn("predicted kernel has zero support on a reachable state",
                      CappedLossWarning, stacklevel=2)
        value = min(value, LOSS_CAP)
    return max(value, 0.0)


def simulate_chains(z0_idx, y_idx, k, schedule: BridgeSchedule, rng, record_times=()):
    """Run full bridge chains from index arrays; returns final indices and snapshots.

    Snapshots are keyed by the recorded grid time and hold the category
    index of every chain at that time.
    """
    z = np.array(z0_idx, dtype=int, copy=True)
    y = np.asarray(y_idx, dtype=int)
    wanted = {int(schedule.grid_index(s)): float(s) for s in record_times}
    snaps = {}
    if 0 in wanted:
        snaps[wanted[0]] = z.copy()
    for i in range(schedule.n_steps):
        beta_t = schedule.beta(i / schedule.n_steps)
        jump = rng.random(z.shape) >= beta_t
        z = np.where(jump, y, z)
        if i + 1 in wanted:
            snaps[wanted[i + 1]] = z.copy()
    return z, snaps
