"""Staged training: the residual estimator first, then the drift corrector.

Both networks share :mod:`red_pet.estimator`'s architecture.  The residual
estimator is fit on forward samples ``x_t`` with an MSE loss on the residual
plus an SSIM loss on the implied one-step endpoint; the drift corrector is fit
on drifted samples built from the frozen estimator's prediction at ``t_max``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffusion import ddpm_alpha_bar, forward_sample, mixed_forward_sample
from .dose import ScaleRecord
from .estimator import (
    EstimatorParams,
    NetArch,
    adamw_init,
    adamw_step,
    net_backward,
    net_forward,
    net_forward_cached,
    net_init,
)
from .metrics import SSIMConfig, ssim_with_grad
from .schedule import ResidualSchedule

log = logging.getLogger(__name__)

DRIFT_COEFFS = ("alpha", "one_minus_alpha")
NOISE_MODES = ("none", "supervised", "unsupervised")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at training step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    n_steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-4
    decay_interval: int = 100_000
    weight_decay: float = 1e-2
    w_mse: float = 1.0
    w_ssim: float = 1.0
    ssim_mode: str = "global"
    c1: float = 1e-4
    c2: float = 9e-4
    lam_low: float = 0.0
    lam_high: float = 1.0
    drift_coeff: str = "alpha"
    noise_mode: str = "none"
    noise_sigma: float = 0.05
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("SSIM constants must be positive")
        if not 0.0 <= self.lam_low <= self.lam_high <= 1.0:
            raise ValueError("lambda range must satisfy 0 <= low <= high <= 1")
        if self.drift_coeff not in DRIFT_COEFFS:
            raise ValueError(f"drift_coeff must be one of {DRIFT_COEFFS}")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def ssim_config(self) -> SSIMConfig:
        return SSIMConfig(self.c1, self.c2, self.ssim_mode)


@dataclass
class SlicePair:
    """Normalized full-dose / low-dose sinograms sharing one scale record."""

    x_full: np.ndarray
    x_low: np.ndarray
    record: ScaleRecord = ScaleRecord()

    def __post_init__(self):
        if np.shape(self.x_full) != np.shape(self.x_low):
            raise ValueError("full and low-dose sinograms differ in shape")


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def ssim_loss(x, y, cfg: SSIMConfig = SSIMConfig()) -> tuple[float, np.ndarray]:
    """``1 - SSIM(x, y)`` and its gradient with respect to ``x``."""
    s, g = ssim_with_grad(x, y, cfg)
    return 1.0 - s, -g


def ren_loss(eps_hat, eps, x_t, t, sched: ResidualSchedule, cfg: TrainConfig = TrainConfig()):
    """Residual-estimator loss for one sample or a batch.

    The SSIM term compares the one-step endpoint ``x_t - alpha(t) * eps_hat``
    with the true endpoint ``x_t - alpha(t) * eps``.  Returns
    ``(total, grad_wrt_eps_hat, {"mse": ..., "ssim": ...})``.
    """
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if not eps_hat.shape == eps.shape == x_t.shape:
        raise ValueError("eps_hat, eps and x_t must share a shape")
    single = eps_hat.ndim == 2
    if single:
        eps_hat, eps, x_t = eps_hat[None], eps[None], x_t[None]
    alpha = np.broadcast_to(np.asarray(sched.alpha(t), dtype=np.float64), (eps_hat.shape[0],))

    l_mse, grad = mse_loss(eps_hat, eps)
    grad = cfg.w_mse * grad
    l_ssim = 0.0
    if cfg.w_ssim:
        scfg = cfg.ssim_config
        for b in range(eps_hat.shape[0]):
            x0_hat = x_t[b] - alpha[b] * eps_hat[b]
            x0 = x_t[b] - alpha[b] * eps[b]
            lb, gb = ssim_loss(x0_hat, x0, scfg)
            l_ssim += lb / eps_hat.shape[0]
            grad[b] += cfg.w_ssim * (-alpha[b]) * gb / eps_hat.shape[0]
    total = cfg.w_mse * l_mse + cfg.w_ssim * l_ssim
    return total, (grad[0] if single else grad), {"mse": l_mse, "ssim": l_ssim}


# --------------------------------------------------------------------------
# Training loops
# --------------------------------------------------------------------------


def _stack(dataset: Sequence[SlicePair], dtype):
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    xf = np.stack([np.asarray(p.x_full, dtype=dtype) for p in dataset])
    xl = np.stack([np.asarray(p.x_low, dtype=dtype) for p in dataset])
    return xf, xl


def _sample_inputs(xf, xl, idx, t, sched, cfg, rng):
    """Forward samples ``x_t`` and residual targets for one minibatch."""
    xs, eps = [], []
    for i, tb in zip(idx, t):
        if cfg.noise_mode == "none":
            state = forward_sample(xf[i], xl[i], sched, tb)
            e = xl[i] - xf[i]
        else:
            seed = int(rng.integers(0, 2**63))
            state, e = mixed_forward_sample(xf[i], xl[i], sched, tb, cfg.noise_sigma, seed,
                                            cfg.noise_mode)
        xs.append(state.x)
        eps.append(e)
    return np.stack(xs), np.stack(eps)


def _check_finite(step, loss, params):
    if not np.isfinite(loss):
        raise NonFiniteLossError(step)
    if not np.all(np.isfinite(params.flat)):
        raise NonFiniteLossError(step, "parameters")


def _optimize(params, cfg, n_steps, step_fn, label):
    """Shared AdamW loop; ``step_fn(step, params)`` returns ``(loss, grad, parts)``."""
    opt = adamw_init(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                     decay_interval=cfg.decay_interval)
    trace = []
    for step in range(n_steps):
        loss, grad, parts = step_fn(step, params)
        _check_finite(step, loss, params)
        try:
            flat, opt = adamw_step(params.flat, grad, opt)
        except FloatingPointError as exc:
            raise NonFiniteLossError(step, "gradient") from exc
        params = EstimatorParams(params.arch, flat)
        trace.append((step, loss, parts.get("mse", loss), parts.get("ssim", 0.0)))
        if step % 100 == 0:
            log.info("%s step %d loss %.6g", label, step, loss)
    return params, trace


def train_ren(dataset: Sequence[SlicePair], cfg: TrainConfig, sched: ResidualSchedule,
              arch: NetArch = NetArch(), init: EstimatorParams | None = None,
              fixed_t: float | None = None):
    """Fit the residual estimator.

    ``fixed_t`` pins every training time (``sched.t_max`` gives the
    supervised one-shot baseline).  Returns ``(params, trace)`` where each
    trace row is ``(step, loss_total, loss_mse, loss_ssim)``.
    """
    dtype = np.dtype(cfg.dtype)
    xf, xl = _stack(dataset, dtype)
    params = init if init is not None else net_init(arch, cfg.seed, dtype)
    rng = np.random.default_rng([cfg.seed, 1])

    def step_fn(step, params):
        idx = rng.integers(0, len(xf), cfg.batch_size)
        if fixed_t is None:
            t = rng.uniform(0.0, sched.t_max, cfg.batch_size)
        else:
            t = np.full(cfg.batch_size, float(fixed_t))
        x_t, eps = _sample_inputs(xf, xl, idx, t, sched, cfg, rng)
        eps_hat, cache = net_forward_cached(params, x_t, t, sched)
        loss, g_out, parts = ren_loss(eps_hat, eps, x_t, t, sched, cfg)
        return loss, net_backward(params, x_t, t, g_out, sched, cache=cache), parts

    return _optimize(params, cfg, cfg.n_steps, step_fn, "ren")


def as_predictor(net, sched: ResidualSchedule) -> Callable:
    """Wrap parameters as ``f(x, t)``; callables pass through unchanged."""
    if isinstance(net, EstimatorParams):
        return lambda x, t: net_forward(net, x, t, sched)
    return net


def make_drifted_sample(pair: SlicePair, ren, t: float, lam: float, sched: ResidualSchedule,
                        coeff: str = "alpha", eps_T_hat: np.ndarray | None = None):
    """Drifted training input and its true counterpart ``(x_hat_t, x_t)``.

    The estimator's residual prediction at ``t_max`` (from ``x_low``) is
    blended with the true residual by ``lam``.  ``coeff="one_minus_alpha"``
    scales the blend by ``1 - alpha(t)`` instead of ``alpha(t)``.
    ``eps_T_hat`` skips the network call when already known.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if coeff not in DRIFT_COEFFS:
        raise ValueError(f"coeff must be one of {DRIFT_COEFFS}")
    x_full = np.asarray(pair.x_full)
    x_low = np.asarray(pair.x_low)
    state = forward_sample(x_full, x_low, sched, t)
    eps = x_low - x_full
    if eps_T_hat is None:
        eps_T_hat = as_predictor(ren, sched)(x_low, float(sched.t_max))
    if lam == 0.0 and coeff == "alpha":
        return state.x.copy(), state.x
    eps_mix = lam * np.asarray(eps_T_hat, dtype=eps.dtype) + (1.0 - lam) * eps
    a = sched.alpha(t)
    scale = a if coeff == "alpha" else 1.0 - a
    x_hat = (x_full + scale * eps_mix).astype(state.x.dtype, copy=False)
    return x_hat, state.x


def predict_batched(params: EstimatorParams, xs: np.ndarray, t: float, sched: ResidualSchedule,
                    batch: int = 16) -> np.ndarray:
    out = [net_forward(params, xs[i : i + batch], t, sched) for i in range(0, len(xs), batch)]
    return np.concatenate(out) if out else np.zeros_like(xs)


def train_dcn(dataset: Sequence[SlicePair], ren, cfg: TrainConfig, sched: ResidualSchedule,
              arch: NetArch = NetArch(), init: EstimatorParams | None = None):
    """Fit the drift corrector against a frozen residual estimator.

    Targets are ``x_t - x_hat_t`` from :func:`make_drifted_sample`.  Returns
    ``(params, trace)``.
    """
    dtype = np.dtype(cfg.dtype)
    xf, xl = _stack(dataset, dtype)
    # zero output layer: the correction starts as a no-op inside the reverse loop
    params = init if init is not None else net_init(arch, cfg.seed + 1, dtype, out_scale=0.0)
    rng = np.random.default_rng([cfg.seed, 2])
    ren_fn = as_predictor(ren, sched)
    eps_T = None
    if cfg.noise_mode == "none" and cfg.n_steps > 0:
        if isinstance(ren, EstimatorParams):
            eps_T = predict_batched(ren, xl, float(sched.t_max), sched)
        else:
            eps_T = np.stack([ren_fn(x, float(sched.t_max)) for x in xl])

    def step_fn(step, params):
        idx = rng.integers(0, len(xf), cfg.batch_size)
        t = rng.uniform(0.0, sched.t_max, cfg.batch_size)
        lam = rng.uniform(cfg.lam_low, cfg.lam_high, cfg.batch_size)
        x_hats, targets = [], []
        for b, i in enumerate(idx):
            if cfg.noise_mode == "none":
                pair = SlicePair(xf[i], xl[i])
                e_T = eps_T[i]
            else:
                seed = int(rng.integers(0, 2**63))
                end, _ = mixed_forward_sample(xf[i], xl[i], sched, sched.t_max, cfg.noise_sigma,
                                              seed, cfg.noise_mode)
                pair = SlicePair(xf[i], end.x)
                e_T = ren_fn(end.x, float(sched.t_max))
            x_hat, x_true = make_drifted_sample(pair, None, t[b], lam[b], sched,
                                                cfg.drift_coeff, eps_T_hat=e_T)
            x_hats.append(x_hat)
            targets.append(x_true - x_hat)
        x_hat = np.stack(x_hats)
        gamma_hat, cache = net_forward_cached(params, x_hat, t, sched)
        loss, g_out = mse_loss(gamma_hat, np.stack(targets))
        return loss, net_backward(params, x_hat, t, g_out, sched, cache=cache), {"mse": loss}

    return _optimize(params, cfg, cfg.n_steps, step_fn, "dcn")


def train_red(dataset: Sequence[SlicePair], cfg: TrainConfig, sched: ResidualSchedule,
              arch: NetArch = NetArch(), epochs: int = 1):
    """Alternate estimator and corrector training ``epochs`` times."""
    ren = dcn = None
    ren_trace, dcn_trace = [], []
    for _ in range(epochs):
        ren, tr = train_ren(dataset, cfg, sched, arch, init=ren)
        ren_trace += tr
        dcn, tr = train_dcn(dataset, ren, cfg, sched, arch, init=dcn)
        dcn_trace += tr
    return ren, dcn, ren_trace, dcn_trace


# --------------------------------------------------------------------------
# DDIM baseline
# --------------------------------------------------------------------------


def train_ddim(dataset: Sequence[SlicePair], cfg: TrainConfig, sched: ResidualSchedule,
               arch: NetArch = NetArch(), alpha_bar: np.ndarray | None = None):
    """Noise-prediction training on full-dose sinograms (Gaussian diffusion baseline).

    The network sees integer DDPM times in ``[1, t_max]``; its time embedding
    uses the same schedule lookup as the residual networks.
    """
    dtype = np.dtype(cfg.dtype)
    xf, _ = _stack(dataset, dtype)
    if alpha_bar is None:
        alpha_bar = ddpm_alpha_bar(sched.t_max)
    params = net_init(arch, cfg.seed + 2, dtype)
    rng = np.random.default_rng([cfg.seed, 3])

    def step_fn(step, params):
        idx = rng.integers(0, len(xf), cfg.batch_size)
        t = rng.integers(1, sched.t_max + 1, cfg.batch_size)
        noise = rng.standard_normal((cfg.batch_size,) + xf.shape[1:]).astype(dtype)
        ab = alpha_bar[t][:, None, None]
        x_t = (np.sqrt(ab) * xf[idx] + np.sqrt(1.0 - ab) * noise).astype(dtype)
        eps_hat, cache = net_forward_cached(params, x_t, t.astype(np.float64), sched)
        loss, g_out = mse_loss(eps_hat, noise)
        return loss, net_backward(params, x_t, t.astype(np.float64), g_out, sched, cache=cache), {"mse": loss}

    return _optimize(params, cfg, cfg.n_steps, step_fn, "ddim")
