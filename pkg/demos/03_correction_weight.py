"""Sweep the drift-correction weight on trained networks.

Uses the checkpoints and dataset of a finished run (demo 02 or the CLI) and
reports the mean sinogram PSNR over training slices for several constant
correction weights, both correction signs, and the uncorrected sampler.
Pick the weight on training slices, then set ``schedule.beta`` (and, if
needed, ``schedule.correction_sign``) in the config.

    python demos/03_correction_weight.py configs/desk.cfg [n_slices]
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from red_pet import experiments as ex
from red_pet.config import load_config
from red_pet.metrics import psnr

cfg = load_config(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parents[1] / "configs" / "smoke.cfg")
n = int(sys.argv[2]) if len(sys.argv) > 2 else 32
out = Path(cfg.out)
ren = ex.load_checkpoint(ex.checkpoint_dir(out) / "ren.redw", cfg)
dcn = ex.load_checkpoint(ex.checkpoint_dir(out) / "dcn.redw", cfg)
data = ex.load_split(out, "train", cfg.data.train_drf)[:n]
lows = np.stack([d.low for d in data])
base = np.mean([psnr(d.low, d.full) for d in data])
print(f"{len(data)} training slices, low-dose input {base:.2f} dB")

for sign in (1.0, -1.0):
    c = replace(cfg, schedule=replace(cfg.schedule, correction_sign=sign))
    for beta in (0.0, 0.05, 0.15, 0.3, 0.5, 1.0):
        if sign < 0 and beta == 0.0:
            continue
        net = dcn if beta > 0 else None
        sinos = np.concatenate([ex.red_restore(lows[i : i + 8], ren, net, c, beta=beta)
                                for i in range(0, len(lows), 8)])
        mean = np.mean([psnr(s, d.full) for s, d in zip(sinos, data)])
        print(f"sign {sign:+.0f}  beta {beta:4.2f}: {mean:6.2f} dB ({mean - base:+.2f})")
