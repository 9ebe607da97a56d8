"""Residual-proportion and drift-correction schedules, and the skip-sampling grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True, eq=False)
class ResidualSchedule:
    """Tables ``alpha[0..t_max]`` and ``beta[0..t_max]``.

    ``alpha(t)`` and ``beta(t)`` accept fractional times and interpolate the
    tables linearly.
    """

    t_max: int
    alpha_table: np.ndarray
    beta_table: np.ndarray
    kind: str = "linear"

    def alpha(self, t):
        return self._lookup(self.alpha_table, t)

    def beta(self, t):
        return self._lookup(self.beta_table, t)

    def _lookup(self, table, t):
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr < 0) or np.any(t_arr > self.t_max):
            raise ValueError(f"time {t} outside [0, {self.t_max}]")
        out = np.interp(t_arr, np.arange(self.t_max + 1, dtype=np.float64), table)
        return float(out) if out.ndim == 0 else out


def make_schedule(t_max: int = 500, kind: str = "linear", beta_const: float = 1.0) -> ResidualSchedule:
    if int(t_max) != t_max or t_max < 1:
        raise ValueError(f"t_max must be a positive integer, got {t_max}")
    if not 0.0 <= beta_const <= 1.0:
        raise ValueError(f"beta_const must lie in [0, 1], got {beta_const}")
    t_max = int(t_max)
    steps = np.arange(t_max + 1, dtype=np.float64)
    if kind == "linear":
        alpha = steps / t_max
    elif kind == "cosine":
        alpha = (1.0 - np.cos(np.pi * steps / t_max)) / 2.0
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    # pin the endpoints against rounding in the cosine branch
    alpha[0], alpha[-1] = 0.0, 1.0
    alpha.setflags(write=False)
    beta = np.full(t_max + 1, float(beta_const))
    beta.setflags(write=False)
    return ResidualSchedule(t_max, alpha, beta, kind)


@dataclass(frozen=True)
class TimeGrid:
    t_s: int
    stride: float
    times: tuple[float, ...]

    def steps(self):
        """Consecutive ``(t, s)`` pairs walked by the reverse process."""
        return list(zip(self.times[:-1], self.times[1:]))


def make_time_grid(t_s: int = 30, t_max: int = 500) -> TimeGrid:
    """Descending grid ``t_max, t_max - r, ..., 0`` with stride ``r = t_max / t_s``."""
    if t_s < 1 or t_s > t_max:
        raise ValueError(f"t_s must satisfy 1 <= t_s <= t_max, got t_s={t_s}, t_max={t_max}")
    stride = t_max / t_s
    times = [float(t_max - k * stride) for k in range(t_s)] + [0.0]
    times[0] = float(t_max)
    return TimeGrid(int(t_s), stride, tuple(times))
