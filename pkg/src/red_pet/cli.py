"""``red`` command line entry point.

Exit codes: 0 ok, 1 bad configuration or input, 2 missing prerequisite,
3 numeric failure, 4 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, load_config
from .dose import apply_scale, normalize
from .estimator import CheckpointError
from .gradcheck import run_gradchecks
from .io import KIND_IMAGE, KIND_SINOGRAM, RSFError, read_rsf, write_rsf
from .training import NonFiniteLossError

log = logging.getLogger("red")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC, EXIT_MISMATCH = 0, 1, 2, 3, 4
COMMANDS = ("generate", "train-ren", "train-dcn", "reconstruct", "evaluate", "ablate", "gradcheck")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="red", description="Residual diffusion for low-dose PET sinograms.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="experiment config file (key = value)")
    p.add_argument("--seed", type=int, help="override the top-level seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--trajectory", action="store_true",
                   help="reconstruct: dump the state after every reverse step")
    p.add_argument("--input", help="reconstruct: a single low-dose sinogram RSF")
    p.add_argument("--oracle-full", help="reconstruct: replace the residual network by the exact "
                   "residual against this full-dose RSF (testing hook)")
    p.add_argument("--baseline", choices=("oneshot", "ddim"),
                   help="train-ren: train a baseline network instead")
    p.add_argument("--methods", help="evaluate/reconstruct: comma-separated method list")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _methods(arg):
    if arg is None:
        return None
    return [m.strip() for m in arg.split(",") if m.strip()]


def _reconstruct_single(cfg, out: Path, args) -> None:
    low, kind, _ = read_rsf(args.input)
    if kind != KIND_SINOGRAM:
        raise RSFError(f"{args.input} does not hold a sinogram")
    stem = Path(args.input).name.removesuffix(".rsf")
    beta = 0.0 if cfg.ablation.no_dc else None
    use_dcn = not cfg.ablation.no_dc and cfg.schedule.beta > 0
    ckdir = ex.checkpoint_dir(out)
    if args.oracle_full:
        full = read_rsf(args.oracle_full)[0]
        _, rec = normalize(low)
        eps = (apply_scale(low, rec) - apply_scale(full, rec)).astype(np.float32)
        ren = lambda x, t: np.broadcast_to(eps, x.shape)  # noqa: E731
    else:
        ren = _require(ckdir / "ren.redw", cfg)
    dcn = _require(ckdir / "dcn.redw", cfg) if use_dcn else None

    dest = out / "recon" / "input"
    traj = None
    if args.trajectory:
        def traj(k, x):
            write_rsf(dest / "trajectory" / f"{stem}_step{k:03d}.rsf", x, KIND_SINOGRAM)
    sino = ex.red_restore(low, ren, dcn, cfg, trajectory=traj, beta=beta)
    write_rsf(dest / f"{stem}_sino.rsf", sino, KIND_SINOGRAM)
    write_rsf(dest / f"{stem}_image.rsf", ex.image_from_sinogram("red", sino, cfg), KIND_IMAGE)


def _require(path: Path, cfg):
    if not path.exists():
        raise ex.MissingPrerequisite(f"checkpoint {path} not found")
    return ex.load_checkpoint(path, cfg)


def _gradcheck(out: Path) -> int:
    results = run_gradchecks()
    out.mkdir(parents=True, exist_ok=True)
    lines = ["check,n_coords,max_rel_err,passed"]
    for r in results:
        lines.append(f"{r.name},{r.n_coords},{r.max_rel_err:.3e},{int(r.passed())}")
        print(f"{'PASS' if r.passed() else 'FAIL'} {r.name}: max rel err {r.max_rel_err:.2e} "
              f"over {r.n_coords} coords")
    (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK if all(r.passed() for r in results) else EXIT_NUMERIC


def run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    out = Path(cfg.out)
    cmd = args.command
    if cmd == "generate":
        rows = ex.generate_dataset(cfg, out)
        print(f"wrote {len(rows)} pairs to {out / 'dataset'}")
    elif cmd == "train-ren":
        path = ex.train_stage(cfg, out, args.baseline or "ren")
        print(f"wrote {path}")
    elif cmd == "train-dcn":
        path = ex.train_stage(cfg, out, "dcn")
        print(f"wrote {path}")
    elif cmd == "reconstruct":
        if args.input:
            _reconstruct_single(cfg, out, args)
        else:
            methods = ex.reconstruct_all(cfg, out, _methods(args.methods))
            print(f"reconstructed {', '.join(methods)}")
    elif cmd == "evaluate":
        reports = ex.evaluate(cfg, out, _methods(args.methods))
        for drf in reports:
            print(f"wrote {out / 'reports' / f'metrics_{ex.drf_tag(drf)}.csv'}")
    elif cmd == "ablate":
        result = ex.run_ablation(cfg, out)
        for v in ex.ABLATION_VARIANTS:
            print(f"{v:>10}: sinogram PSNR {result.mean(v):.3f} dB")
    elif cmd == "gradcheck":
        return _gradcheck(out / "reports")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which would read as a missing prerequisite
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ex.MissingPrerequisite as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (NonFiniteLossError, FloatingPointError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (ex.CheckpointMismatch, CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_MISMATCH
    except (ConfigError, RSFError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
