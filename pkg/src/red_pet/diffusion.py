"""Residual diffusion between full-dose and low-dose sinograms.

The forward process mixes in a scheduled fraction of the residual
``eps = x_low - x_full``; the reverse process removes predicted residual
increments and optionally adds back a predicted drift correction.  A
deterministic DDIM sampler is included as the Gaussian-noise baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dose import rng_for
from .schedule import ResidualSchedule, TimeGrid

Predictor = Callable[[np.ndarray, float], np.ndarray]
MIXED_MODES = ("supervised", "unsupervised")


@dataclass(frozen=True)
class DiffusionState:
    x: np.ndarray
    t: float


@dataclass
class DriftRecord:
    """Per-step prediction errors and the drift they accumulate into."""

    deltas: list
    gamma: np.ndarray


def _same_shape(a, b, what="arrays"):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{what} have mismatched shapes {a.shape} and {b.shape}")
    return a, b


def residual(x_low: np.ndarray, x_full: np.ndarray) -> np.ndarray:
    x_low, x_full = _same_shape(x_low, x_full, "sinograms")
    return x_low - x_full


def forward_sample(x_full, x_low, sched: ResidualSchedule, t: float) -> DiffusionState:
    x_full, x_low = _same_shape(x_full, x_low, "sinograms")
    a = sched.alpha(t)
    x = (1.0 - a) * x_full + a * x_low
    # exact endpoints; the convex form can be off by an ulp
    if a == 0.0:
        x = x_full.copy()
    elif a == 1.0:
        x = x_low.copy()
    return DiffusionState(x.astype(np.result_type(x_full, x_low), copy=False), float(t))


def reverse_step(state: DiffusionState, eps_hat: np.ndarray, s: float,
                 sched: ResidualSchedule) -> DiffusionState:
    """Move from ``state.t`` to an earlier time ``s`` using a residual estimate."""
    if not s < state.t:
        raise ValueError(f"reverse step must go backwards in time (t={state.t}, s={s})")
    x, eps_hat = _same_shape(state.x, eps_hat, "state and residual")
    d_alpha = sched.alpha(state.t) - sched.alpha(s)
    return DiffusionState((x - d_alpha * eps_hat).astype(x.dtype, copy=False), float(s))


def compute_drift(x_true: DiffusionState, x_pred: DiffusionState) -> np.ndarray:
    if x_true.t != x_pred.t:
        raise ValueError(f"drift needs states at the same time, got {x_true.t} and {x_pred.t}")
    a, b = _same_shape(x_true.x, x_pred.x, "states")
    return a - b


def apply_correction(x_hat: DiffusionState, gamma_hat: np.ndarray, sched: ResidualSchedule,
                     sign: float = 1.0) -> DiffusionState:
    """``x = x_hat + sign * beta(t) * gamma_hat``; ``sign=-1`` flips the correction."""
    x, gamma_hat = _same_shape(x_hat.x, gamma_hat, "state and drift")
    b = sched.beta(x_hat.t)
    if b == 0.0:
        return DiffusionState(x.copy(), x_hat.t)
    return DiffusionState((x + (sign * b) * gamma_hat).astype(x.dtype, copy=False), x_hat.t)


def reconstruct(x_low: np.ndarray, ren_predict: Predictor, dcn_predict: Predictor | None,
                sched: ResidualSchedule, grid: TimeGrid, correction_sign: float = 1.0,
                trajectory: Callable[[int, DiffusionState], None] | None = None) -> np.ndarray:
    """Run the reverse process from ``x_low`` (time ``t_max``) down to time 0.

    ``ren_predict(x, t)`` estimates the residual and ``dcn_predict(x, t)`` the
    accumulated drift; pass ``dcn_predict=None`` to skip correction.
    ``trajectory(k, state)`` is called for every grid point including the start.
    The returned array is not clamped.
    """
    if grid.times[0] != sched.t_max:
        raise ValueError(f"grid starts at {grid.times[0]} but the schedule ends at {sched.t_max}")
    state = DiffusionState(np.array(x_low, copy=True), float(grid.times[0]))
    if trajectory is not None:
        trajectory(0, state)
    for k, (t, s) in enumerate(grid.steps(), start=1):
        eps_hat = np.asarray(ren_predict(state.x, t))
        if eps_hat.shape != state.x.shape:
            raise ValueError(f"residual predictor returned shape {eps_hat.shape}, expected {state.x.shape}")
        state = reverse_step(state, eps_hat, s, sched)
        if dcn_predict is not None and sched.beta(s) != 0.0:
            gamma_hat = np.asarray(dcn_predict(state.x, s))
            if gamma_hat.shape != state.x.shape:
                raise ValueError(f"drift predictor returned shape {gamma_hat.shape}, expected {state.x.shape}")
            state = apply_correction(state, gamma_hat, sched, correction_sign)
        if trajectory is not None:
            trajectory(k, state)
    return state.x


def accumulated_drift(deltas, alphas) -> DriftRecord:
    """Telescoped drift ``sum_i (alpha_i - alpha_{i-1}) * delta_i``.

    ``deltas[k]`` is the residual prediction error made on the step from
    ``alphas[k]`` down to ``alphas[k + 1]``, so ``alphas`` has one more entry.
    """
    if len(alphas) != len(deltas) + 1:
        raise ValueError("need exactly one more alpha value than deltas")
    total = np.zeros_like(np.asarray(deltas[0], dtype=np.float64))
    for k, delta in enumerate(deltas):
        total += (alphas[k] - alphas[k + 1]) * np.asarray(delta, dtype=np.float64)
    return DriftRecord(list(deltas), total)


# --------------------------------------------------------------------------
# Mixed Gaussian noise
# --------------------------------------------------------------------------


def mixed_forward_sample(x_full, x_low, sched: ResidualSchedule, t: float, sigma: float = 0.05,
                         seed: int = 0, mode: str = "supervised") -> tuple[DiffusionState, np.ndarray]:
    """Forward sample with an additional Gaussian perturbation.

    ``supervised``: the low-dose endpoint is ``x_low + n`` with
    ``n ~ N(0, sigma^2)``, so the residual is the difference of the noisy pair.
    ``unsupervised``: ``x_low`` is ignored and the residual is ``n`` alone.

    Returns the state and the residual it was built from.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if mode not in MIXED_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MIXED_MODES}")
    x_full = np.asarray(x_full)
    if mode == "supervised":
        x_full, x_low = _same_shape(x_full, x_low, "sinograms")
        if sigma == 0:
            return forward_sample(x_full, x_low, sched, t), x_low - x_full
    noise = np.zeros(x_full.shape)
    if sigma > 0:
        noise = sigma * rng_for(seed).standard_normal(x_full.shape)
    noise = noise.astype(x_full.dtype, copy=False)
    eps = (x_low - x_full) + noise if mode == "supervised" else noise
    a = sched.alpha(t)
    x = x_full + a * eps if a != 0.0 else x_full.copy()
    return DiffusionState(x.astype(x_full.dtype, copy=False), float(t)), eps


# --------------------------------------------------------------------------
# DDIM baseline (eta = 0)
# --------------------------------------------------------------------------


def _check_alpha_bar(*values):
    for v in values:
        if not 0.0 < v <= 1.0:
            raise ValueError(f"alpha_bar must lie in (0, 1], got {v}")


def ddim_forward(x0: np.ndarray, alpha_bar_t: float, noise: np.ndarray) -> np.ndarray:
    _check_alpha_bar(alpha_bar_t)
    x0, noise = _same_shape(x0, noise, "signal and noise")
    return np.sqrt(alpha_bar_t) * x0 + np.sqrt(1.0 - alpha_bar_t) * noise


def ddim_predict_x0(x_t, eps_hat, alpha_bar_t: float) -> np.ndarray:
    _check_alpha_bar(alpha_bar_t)
    x_t, eps_hat = _same_shape(x_t, eps_hat, "state and noise estimate")
    return (x_t - np.sqrt(1.0 - alpha_bar_t) * eps_hat) / np.sqrt(alpha_bar_t)


def ddim_step(x_t, eps_hat, alpha_bar_t: float, alpha_bar_s: float) -> np.ndarray:
    _check_alpha_bar(alpha_bar_t, alpha_bar_s)
    if alpha_bar_s == alpha_bar_t:
        return np.array(x_t, copy=True)
    x0_hat = ddim_predict_x0(x_t, eps_hat, alpha_bar_t)
    return np.sqrt(alpha_bar_s) * x0_hat + np.sqrt(1.0 - alpha_bar_s) * np.asarray(eps_hat)


def ddpm_alpha_bar(t_max: int = 500, beta_start: float = 1e-4, beta_end: float = 0.02) -> np.ndarray:
    """Cumulative products of a linear DDPM variance schedule, index 0 -> 1."""
    betas = np.linspace(beta_start, beta_end, t_max)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def ddim_sample(x_start: np.ndarray, eps_predict: Predictor, alpha_bar: np.ndarray,
                t_start: int, n_steps: int) -> np.ndarray:
    """Deterministic DDIM from ``x_start`` at integer time ``t_start`` down to 0.

    ``eps_predict(x, t)`` receives the integer time as a float.
    """
    times = np.unique(np.linspace(0, t_start, n_steps + 1).round().astype(int))[::-1]
    x = np.array(x_start, copy=True)
    for t, s in zip(times[:-1], times[1:]):
        eps_hat = eps_predict(x, float(t))
        x = ddim_step(x, eps_hat, alpha_bar[t], alpha_bar[s]).astype(x.dtype, copy=False)
    return x
