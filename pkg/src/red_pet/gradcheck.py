"""Central finite-difference checks of the hand-written gradients (float64)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimator import NetArch, net_backward, net_forward, net_init
from .metrics import SSIMConfig
from .schedule import make_schedule
from .training import TrainConfig, mse_loss, ren_loss, ssim_loss


@dataclass
class GradCheckResult:
    name: str
    n_coords: int
    max_rel_err: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


def rel_err(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor guards near-zero components."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def fd_check(fn, grad, x: np.ndarray, coords, h: float = 1e-5) -> float:
    """Max relative error of ``grad`` against central differences of scalar ``fn``."""
    flat = x.reshape(-1)
    errs = []
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        errs.append(rel_err(grad.reshape(-1)[i], (fp - fm) / (2 * h)))
    return float(np.max(errs))


def _coords(rng, size, n):
    return rng.choice(size, size=min(n, size), replace=False)


def run_gradchecks(n_coords: int = 200, seed: int = 0) -> list[GradCheckResult]:
    """Check the network, MSE, SSIM (both modes) and combined residual loss gradients."""
    rng = np.random.default_rng(seed)
    sched = make_schedule(100)
    results = []

    # network parameters, through a random linear readout of the output
    arch = NetArch(widths=(1, 4, 4, 1), kernel=3, temb_dim=8)
    params = net_init(arch, seed=seed, dtype=np.float64)
    x = rng.standard_normal((2, 12, 10))
    t = np.array([17.0, 63.0])
    w = rng.standard_normal(x.shape)
    theta = params.flat.copy()

    def net_loss(flat):
        return float(np.sum(w * net_forward(params.__class__(arch, flat), x, t, sched)))

    g = net_backward(params, x, t, w, sched)
    coords = _coords(rng, theta.size, n_coords)
    results.append(GradCheckResult("net_backward", len(coords), fd_check(net_loss, g, theta, coords)))

    # losses with respect to their first argument
    a = rng.random((24, 24))
    b = a + 0.1 * rng.standard_normal(a.shape)
    coords = _coords(rng, a.size, n_coords)
    val, g = mse_loss(b, a)
    results.append(GradCheckResult("mse_loss", len(coords),
                                   fd_check(lambda z: mse_loss(z, a)[0], g, b.copy(), coords)))
    for mode in ("global", "windowed"):
        cfg = SSIMConfig(mode=mode)
        val, g = ssim_loss(b, a, cfg)
        results.append(GradCheckResult(f"ssim_loss[{mode}]", len(coords),
                                       fd_check(lambda z: ssim_loss(z, a, cfg)[0], g, b.copy(), coords)))

    eps = rng.standard_normal((2, 16, 16)) * 0.1
    eps_hat = eps + 0.02 * rng.standard_normal(eps.shape)
    x_t = rng.random(eps.shape)
    for mode in ("global", "windowed"):
        tcfg = TrainConfig(ssim_mode=mode)
        _, g, _ = ren_loss(eps_hat, eps, x_t, t, sched, tcfg)
        coords = _coords(rng, eps_hat.size, n_coords)
        results.append(GradCheckResult(
            f"ren_loss[{mode}]", len(coords),
            fd_check(lambda z: ren_loss(z, eps, x_t, t, sched, tcfg)[0], g, eps_hat.copy(), coords)))
    return results
