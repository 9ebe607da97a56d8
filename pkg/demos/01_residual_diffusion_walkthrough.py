"""Walk through the residual forward process and its exact inverse on one slice.

A phantom is projected to a full-dose sinogram, thinned to a low-dose one,
and both are max-normalized with the low-dose record.  The forward process
blends them by alpha(t); the reverse process with an exact residual oracle
recovers the full-dose sinogram, and a deliberately biased predictor shows
how per-step errors accumulate into a drift that a correction removes.

Run: python demos/01_residual_diffusion_walkthrough.py
"""

import numpy as np

from red_pet import tomo
from red_pet.diffusion import DiffusionState, apply_correction, compute_drift, forward_sample, reconstruct, reverse_step
from red_pet.dose import DoseConfig, apply_scale, normalize, simulate_low_dose
from red_pet.metrics import psnr
from red_pet.schedule import make_schedule, make_time_grid

geom = tomo.ProjectionGeometry(64, 96, 96)
spec = tomo.random_phantom_spec(np.random.default_rng(7))
image = tomo.make_phantom(spec, 64, 64)
full = tomo.forward_project(image, geom)
low = simulate_low_dose(full, DoseConfig(drf=20.0, count_scale=1e6, seed=7))

x_low, rec = normalize(low)
x_full = apply_scale(full, rec)
eps = x_low - x_full
print(f"low-dose input PSNR vs full dose: {psnr(x_low, x_full):.2f} dB")

sched = make_schedule(500, "linear", beta_const=0.0)
grid = make_time_grid(30, 500)
for t in (0, 125, 250, 375, 500):
    x_t = forward_sample(x_full, x_low, sched, t).x
    print(f"  t={t:3d}  alpha={sched.alpha(t):.2f}  PSNR(x_t, x_F)={psnr(x_t, x_full):6.2f} dB")

# exact residual: the reverse process telescopes back to x_F
out = reconstruct(x_low, lambda x, t: eps, None, sched, grid)
print(f"oracle reverse process, max |x_0 - x_F| = {np.abs(out - x_full).max():.2e}")

# a predictor that over-estimates the residual by 10% leaves a drift
state_true = state_pred = DiffusionState(x_low, 500.0)
for t, s in grid.steps():
    state_true = reverse_step(state_true, eps, s, sched)
    state_pred = reverse_step(state_pred, 1.1 * eps, s, sched)
gamma = compute_drift(state_true, state_pred)
print(f"10% biased residual: PSNR {psnr(state_pred.x, x_full):.2f} dB, drift norm {np.linalg.norm(gamma):.3f}")
fixed = apply_correction(state_pred, gamma, make_schedule(500, beta_const=1.0))
print(f"after exact drift correction: max |x - x_F| = {np.abs(fixed.x - x_full).max():.2e}")

# image domain
for name, sino in (("low dose", low), ("full dose", full)):
    img = tomo.fbp(sino, geom, "ramp-hann", clip_negative=True)
    print(f"FBP of {name:9s}: image PSNR {psnr(img, image):.2f} dB")
