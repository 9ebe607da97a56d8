"""Run the full command-line pipeline and print the mean metric rows.

    python demos/02_cli_pipeline.py                      # seconds, configs/smoke.cfg
    python demos/02_cli_pipeline.py configs/desk.cfg     # desk experiment, about 15 min

Each stage is a ``red`` subcommand; outputs land under the config's ``out``.
"""

import csv
import sys
import time
from pathlib import Path

from red_pet import cli
from red_pet.config import load_config

cfg_path = sys.argv[1] if len(sys.argv) > 1 else str(Path(__file__).parents[1] / "configs" / "smoke.cfg")
cfg = load_config(cfg_path)
out = Path(cfg.out)

for cmd in ("generate", "train-ren", "train-dcn", "reconstruct", "evaluate"):
    t0 = time.perf_counter()
    code = cli.main([cmd, "--config", cfg_path])
    print(f"red {cmd:<12s} exit {code}  {time.perf_counter() - t0:6.1f} s")
    if code:
        sys.exit(code)

for drf in cfg.eval_drfs:
    path = out / "reports" / f"metrics_drf{drf:g}.csv"
    print(f"\nDRF {drf:g}  ({path})")
    print(f"{'domain':<9s} {'method':<8s} {'PSNR dB':>8s} {'SSIM':>7s} {'NRMSE':>7s}")
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["slice"] == "MEAN":
                print(f"{r['domain']:<9s} {r['method']:<8s} {float(r['psnr_db']):8.2f} "
                      f"{float(r['ssim']):7.4f} {float(r['nrmse']):7.4f}")
print("\nrows with method 'osem' in the sinogram domain are the unprocessed low-dose input")
