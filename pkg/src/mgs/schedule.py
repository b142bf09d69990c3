"""Variance-exploding noise schedules and sampling timestep grids.

The forward process adds Gaussian noise with standard deviation ``sigma_t``
growing along ``t = 0..T``; the transition from level ``s`` to a noisier
level ``t`` is Gaussian with variance ``sigma_t**2 - sigma_s**2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

GEOMETRIC = "geometric"
LINEAR = "linear-in-sigma"
SCHEDULE_KINDS = (GEOMETRIC, LINEAR)


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly increasing noise levels ``sigma_0 < ... < sigma_T``."""

    sigmas: np.ndarray
    kind: str

    def __post_init__(self):
        sig = np.asarray(self.sigmas, dtype=float)
        if sig.ndim != 1 or sig.size < 2:
            raise ConfigError("sigmas: need a 1-D array with at least two levels")
        if sig[0] < 0.0 or sig[-1] <= 0.0:
            raise ConfigError("sigmas: require sigma_0 >= 0 and sigma_T > 0")
        if np.any(np.diff(sig) <= 0.0):
            raise ConfigError("sigmas: must be strictly increasing")
        sig.setflags(write=False)
        object.__setattr__(self, "sigmas", sig)

    @property
    def num_steps(self) -> int:
        """Largest timestep index T."""
        return self.sigmas.size - 1

    def sigma(self, t: int) -> float:
        if not 0 <= t <= self.num_steps:
            raise ConfigError(f"timestep {t} outside schedule range 0..{self.num_steps}")
        return float(self.sigmas[t])


@dataclass(frozen=True)
class TimestepGrid:
    """Descending timestep indices ``t_n > ... > t_0`` with ``t_0 = 0``."""

    steps: np.ndarray

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=int)
        if steps.ndim != 1 or steps.size == 0:
            raise ConfigError("steps: need a non-empty 1-D index array")
        if np.any(np.diff(steps) >= 0):
            raise ConfigError("steps: must be strictly descending")
        if steps[-1] != 0:
            raise ConfigError("steps: grid must end at timestep 0")
        steps.setflags(write=False)
        object.__setattr__(self, "steps", steps)

    def __len__(self) -> int:
        return self.steps.size

    @property
    def num_transitions(self) -> int:
        return self.steps.size - 1

    def validate_for(self, schedule: NoiseSchedule) -> None:
        if self.steps[0] > schedule.num_steps:
            raise ConfigError(
                f"steps: index {self.steps[0]} exceeds schedule range 0..{schedule.num_steps}"
            )


def build_schedule(kind: str, sigma_min: float, sigma_max: float, num_steps: int) -> NoiseSchedule:
    """Build a schedule of ``num_steps + 1`` sigmas from ``sigma_min`` to ``sigma_max``."""
    if not 0.0 < sigma_min < sigma_max:
        raise ConfigError(f"schedule bounds: require 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})")
    if num_steps < 2:
        raise ConfigError(f"num_steps: require >= 2, got {num_steps}")
    if kind == GEOMETRIC:
        sigmas = np.geomspace(sigma_min, sigma_max, num_steps + 1)
    elif kind == LINEAR:
        sigmas = np.linspace(sigma_min, sigma_max, num_steps + 1)
    else:
        raise ConfigError(f"schedule kind: unknown {kind!r}, expected one of {SCHEDULE_KINDS}")
    return NoiseSchedule(sigmas=sigmas, kind=kind)


def transition_variance(schedule: NoiseSchedule, s: int, t: int) -> float:
    """Variance ``sigma_t**2 - sigma_s**2`` of the noising transition ``s -> t``."""
    if s >= t:
        raise ValueError(f"transition requires s < t, got s={s}, t={t}")
    sig_s = schedule.sigma(s)
    sig_t = schedule.sigma(t)
    return sig_t**2 - sig_s**2


def uniform_grid(schedule: NoiseSchedule, num_sampling_steps: int) -> TimestepGrid:
    """Uniformly spaced grid of ``num_sampling_steps`` transitions from T down to 0."""
    T = schedule.num_steps
    if not 1 <= num_sampling_steps <= T:
        raise ConfigError(f"sampling steps: require 1 <= steps <= {T}, got {num_sampling_steps}")
    idx = np.rint(np.linspace(T, 0, num_sampling_steps + 1)).astype(int)
    # rounding can only collide for steps > T, excluded above
    return TimestepGrid(steps=idx)
