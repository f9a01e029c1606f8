"""Discrete noise schedules for the diffusion forward/reverse processes.

Conventions used throughout the package:

* Timesteps are 1-indexed, ``t`` in ``{1..T}``; ``t = 0`` denotes clean data
  with ``alpha_bar[0] := 1`` so the final reverse step emits the clean sample.
* ``beta`` ramps linearly from ``beta_start`` to ``beta_end`` over the T
  native steps (no respacing from a longer parent schedule).
* The per-step stochasticity is ``sigma_t = eta * sqrt((1 - abar_{t-1}) /
  (1 - abar_t)) * sqrt(1 - abar_t / abar_{t-1})``; ``eta = 0`` gives the
  fully deterministic sampler, ``eta = 1`` recovers ancestral noise levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """All per-timestep diffusion coefficients for a T-step process.

    ``beta``, ``alpha`` and ``alpha_bar`` are length-T arrays indexed so that
    entry ``i`` holds the value for timestep ``t = i + 1``; use :meth:`abar`
    for the 1-indexed (and ``t = 0``) view.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    eta: float

    def abar(self, t: int) -> float:
        """Cumulative signal level ``alpha_bar`` at step t, with abar(0) = 1."""
        if not 0 <= t <= self.T:
            raise ValueError(f"step index {t} outside [0, {self.T}]")
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])


def make_schedule(T: int, beta_start: float, beta_end: float, eta: float) -> NoiseSchedule:
    """Build a linear-ramp schedule over T native steps.

    Inputs are validated hard: T >= 2, 0 < beta_start <= beta_end < 1 and
    0 <= eta <= 1. Construction is deterministic, so identical inputs yield
    bit-identical schedules.
    """
    if not isinstance(T, int) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, eta=float(eta))


def sigma_t(s: NoiseSchedule, t: int) -> float:
    """Reverse-step noise scale at step t (0 when eta = 0 or at t = 1).

    Satisfies ``sigma_t**2 <= 1 - abar(t-1)`` for any eta <= 1, which keeps
    the noise-direction coefficient ``sqrt(1 - abar_{t-1} - sigma_t**2)``
    real.
    """
    if not 1 <= t <= s.T:
        raise ValueError(f"step index {t} outside [1, {s.T}]")
    if s.eta == 0.0:
        return 0.0
    ab_prev = s.abar(t - 1)
    ab = s.abar(t)
    return s.eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_prev)
