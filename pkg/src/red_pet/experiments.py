"""Experiment orchestration shared by the command line and the demos.

Directory layout under the output root::

    dataset/manifest.csv
    dataset/{train,test}/s00000_{full,image,drf20}.rsf
    checkpoints/{ren,dcn,oneshot,ddim}.redw  (+ *_loss.csv)
    recon/<method>/drf20/s00000_{sino,image}.rsf
    reports/metrics_drf20.csv, previews/*.pgm, profiles/*.csv
    ablation/ablation.csv
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from pathlib import Path

import numpy as np

from . import tomo
from .config import ExperimentConfig
from .diffusion import ddim_forward, ddim_sample, ddpm_alpha_bar, reconstruct
from .dose import DoseConfig, ScaleRecord, apply_scale, denormalize, normalize, rng_for, simulate_low_dose
from .estimator import EstimatorParams, load_params, net_forward, save_params
from .io import KIND_IMAGE, KIND_SINOGRAM, read_rsf, write_loss_csv, write_pgm16, write_rsf
from .metrics import NRMSE_CONVENTION, MetricsReport, psnr
from .schedule import make_schedule, make_time_grid
from .training import SlicePair, TrainConfig, train_dcn, train_ddim, train_ren

log = logging.getLogger(__name__)

SPLITS = {"train": 0, "test": 1}
LEARNED_METHODS = ("red", "red_nodc", "oneshot", "ddim")
ALL_METHODS = ("osem", "fbp") + LEARNED_METHODS
ABLATION_VARIANTS = ("w/o DC+SL", "w/o DC", "w/o SL", "RED")
RECON_CHUNK = 8


class MissingPrerequisite(RuntimeError):
    pass


class CheckpointMismatch(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Small helpers
# --------------------------------------------------------------------------


def geometry(cfg: ExperimentConfig) -> tomo.ProjectionGeometry:
    return tomo.ProjectionGeometry(cfg.data.image_size, cfg.data.n_angles, cfg.data.n_bins)


def schedule(cfg: ExperimentConfig, beta: float | None = None):
    s = cfg.schedule
    return make_schedule(s.t_max, s.kind, s.beta if beta is None else beta)


def time_grid(cfg: ExperimentConfig, t_s: int | None = None):
    return make_time_grid(cfg.schedule.t_s if t_s is None else t_s, cfg.schedule.t_max)


def drf_tag(drf: float) -> str:
    return f"drf{drf:g}"


def worker_count(cfg: ExperimentConfig) -> int:
    n = cfg.workers
    env = os.environ.get("RED_WORKERS")
    if env:
        n = min(n, max(1, int(env)))
    return n


def pmap(fn, items, workers: int):
    """Ordered map; fans out to processes when ``workers > 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def train_config(cfg: ExperimentConfig, seed: int | None = None, **overrides) -> TrainConfig:
    noise_mode = cfg.mixed.mode
    return replace(cfg.train, seed=cfg.seed if seed is None else seed, noise_mode=noise_mode,
                   noise_sigma=cfg.mixed.sigma, **overrides)


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------


def _seed64(*words) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1, np.uint64)[0])


def _slice_seeds(seed: int, split: str, idx: int, drf: float | None = None) -> int:
    words = [seed, SPLITS[split], idx]
    if drf is not None:
        words.append(round(drf * 1000))
    return _seed64(*words)


def _slice_dir(out: Path, split: str) -> Path:
    return out / "dataset" / split


def _generate_slice(job, cfg: ExperimentConfig, out: Path):
    split, idx = job
    geom = geometry(cfg)
    d = _slice_dir(out, split)
    phantom_seed = _slice_seeds(cfg.seed, split, idx)
    spec = tomo.random_phantom_spec(np.random.default_rng(phantom_seed), cfg.data.n_organs,
                                    cfg.data.n_lesions)
    image = tomo.make_phantom(spec, cfg.data.image_size, cfg.data.image_size).astype(np.float32)
    full = tomo.forward_project(image, geom).astype(np.float32)
    stem = f"s{idx:05d}"
    write_rsf(d / f"{stem}_image.rsf", image, KIND_IMAGE)
    write_rsf(d / f"{stem}_full.rsf", full, KIND_SINOGRAM)
    rows = []
    for drf in cfg.data.drfs:
        dose_seed = _slice_seeds(cfg.seed, split, idx, drf)
        low = simulate_low_dose(full, DoseConfig(drf, cfg.data.count_scale, dose_seed))
        name = f"{stem}_{drf_tag(drf)}.rsf"
        write_rsf(d / name, low, KIND_SINOGRAM)
        rows.append({"split": split, "slice": idx, "drf": f"{drf:g}",
                     "full": f"{split}/{stem}_full.rsf", "low": f"{split}/{name}",
                     "image": f"{split}/{stem}_image.rsf",
                     "phantom_seed": phantom_seed, "dose_seed": dose_seed})
    return rows


MANIFEST_FIELDS = ("split", "slice", "drf", "full", "low", "image", "phantom_seed", "dose_seed")


def generate_dataset(cfg: ExperimentConfig, out) -> list[dict]:
    """Phantoms, full-dose sinograms and per-DRF low-dose sinograms plus a manifest."""
    out = Path(out)
    jobs = [("train", i) for i in range(cfg.data.n_train)] + [("test", i) for i in range(cfg.data.n_test)]
    results = pmap(partial(_generate_slice, cfg=cfg, out=out), jobs, worker_count(cfg))
    rows = [r for rs in results for r in rs]
    path = out / "dataset" / "manifest.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def read_manifest(out) -> list[dict]:
    path = Path(out) / "dataset" / "manifest.csv"
    if not path.exists():
        raise MissingPrerequisite(f"dataset manifest not found at {path}; run 'generate' first")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class SliceData:
    idx: int
    full: np.ndarray
    low: np.ndarray
    image: np.ndarray


def load_split(out, split: str, drf: float) -> list[SliceData]:
    out = Path(out)
    rows = [r for r in read_manifest(out) if r["split"] == split and float(r["drf"]) == drf]
    data = []
    for r in rows:
        base = out / "dataset"
        data.append(SliceData(int(r["slice"]), read_rsf(base / r["full"])[0],
                              read_rsf(base / r["low"])[0], read_rsf(base / r["image"])[0]))
    return data


def make_pair(full: np.ndarray, low: np.ndarray) -> SlicePair:
    """Normalize a full/low pair by the low-dose maximum (known at inference time)."""
    x_low, rec = normalize(np.asarray(low, dtype=np.float32))
    return SlicePair(apply_scale(full, rec).astype(np.float32), x_low.astype(np.float32), rec)


def noisy_input(low: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add ``N(0, sigma^2)`` noise in normalized units (mixed-noise experiments)."""
    x, rec = normalize(np.asarray(low, dtype=np.float32))
    x = x + sigma * rng_for(seed).standard_normal(x.shape)
    return denormalize(x, rec)


def training_pairs(cfg: ExperimentConfig, out) -> list[SlicePair]:
    data = load_split(out, "train", cfg.data.train_drf)
    if not data:
        raise MissingPrerequisite("no training slices at the configured train DRF")
    return [make_pair(d.full, d.low) for d in data]


# --------------------------------------------------------------------------
# Training stages
# --------------------------------------------------------------------------


def checkpoint_dir(out) -> Path:
    return Path(out) / "checkpoints"


def _steps(value: int, fallback: int) -> int:
    return fallback if value < 0 else value


def train_stage(cfg: ExperimentConfig, out, stage: str) -> Path:
    """Train one network and write ``<stage>.redw`` plus ``<stage>_loss.csv``.

    ``stage`` is ``ren``, ``dcn``, ``oneshot`` or ``ddim``.  With
    ``stages.epochs > 1`` the ``dcn`` stage alternates further estimator and
    corrector passes and overwrites ``ren.redw`` with the refreshed estimator.
    """
    ckdir = checkpoint_dir(out)
    sched = schedule(cfg)
    if stage == "dcn":
        ren_path = ckdir / "ren.redw"
        if not ren_path.exists():
            raise MissingPrerequisite(f"drift-correction training needs {ren_path}")
        ren = load_checkpoint(ren_path, cfg)
    pairs = training_pairs(cfg, out)
    w_ssim = 0.0 if cfg.ablation.no_sl else cfg.train.w_ssim
    tcfg = train_config(cfg, w_ssim=w_ssim)
    if stage == "ren":
        params, trace = train_ren(pairs, tcfg, sched, cfg.net)
    elif stage == "dcn":
        dcfg = replace(tcfg, n_steps=_steps(cfg.stages.dcn_steps, tcfg.n_steps))
        params, trace = train_dcn(pairs, ren, dcfg, sched, cfg.net)
        # further epochs refresh the estimator, then the corrector, from their current weights
        ren_trace = []
        for epoch in range(1, cfg.stages.epochs):
            ren, tr = train_ren(pairs, replace(tcfg, seed=tcfg.seed + 10 * epoch), sched, cfg.net, init=ren)
            ren_trace += tr
            params, tr = train_dcn(pairs, ren, replace(dcfg, seed=dcfg.seed + 10 * epoch), sched,
                                   cfg.net, init=params)
            trace += tr
        if ren_trace:
            save_params(ckdir / "ren.redw", ren)
            write_loss_csv(ckdir / "ren_refresh_loss.csv", ren_trace)
    elif stage == "oneshot":
        tcfg = replace(tcfg, n_steps=_steps(cfg.stages.baseline_steps, tcfg.n_steps))
        params, trace = train_ren(pairs, tcfg, sched, cfg.net, fixed_t=float(sched.t_max))
    elif stage == "ddim":
        tcfg = replace(tcfg, n_steps=_steps(cfg.stages.baseline_steps, tcfg.n_steps))
        params, trace = train_ddim(pairs, tcfg, sched, cfg.net)
    else:
        raise ValueError(f"unknown training stage {stage!r}")
    path = ckdir / f"{stage}.redw"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_params(path, params)
    write_loss_csv(ckdir / f"{stage}_loss.csv", trace)
    return path


def load_checkpoint(path, cfg: ExperimentConfig) -> EstimatorParams:
    params = load_params(path)
    if params.arch != cfg.net:
        raise CheckpointMismatch(f"{path} holds architecture {params.arch}, config expects {cfg.net}")
    return params


# --------------------------------------------------------------------------
# Reconstruction
# --------------------------------------------------------------------------


@dataclass
class Models:
    ren: EstimatorParams | None = None
    dcn: EstimatorParams | None = None
    oneshot: EstimatorParams | None = None
    ddim: EstimatorParams | None = None


def red_restore(lows, ren, dcn, cfg: ExperimentConfig, t_s: int | None = None,
                trajectory=None, beta: float | None = None) -> np.ndarray:
    """Run the residual reverse process on a stack of raw low-dose sinograms.

    Each slice is max-normalized by itself, restored, denormalized and
    clamped at zero.  ``ren``/``dcn`` are parameter sets or ``f(x, t)``
    callables; ``dcn=None`` disables drift correction.
    """
    lows = np.asarray(lows, dtype=np.float32)
    single = lows.ndim == 2
    if single:
        lows = lows[None]
    normed = [normalize(x) for x in lows]
    x = np.stack([n[0] for n in normed]).astype(np.float32)
    sched = schedule(cfg, beta)
    grid = time_grid(cfg, t_s)

    def wrap(net):
        if net is None or not isinstance(net, EstimatorParams):
            return net
        return lambda z, t: net_forward(net, z, t, sched)

    traj = None
    if trajectory is not None:
        def traj(k, state):
            xs = np.stack([denormalize(s, n[1]) for s, n in zip(state.x, normed)])
            trajectory(k, xs[0] if single else xs)
    x0 = reconstruct(x, wrap(ren), wrap(dcn), sched, grid, cfg.schedule.correction_sign, traj)
    out = np.stack([np.maximum(denormalize(s, n[1]), 0) for s, n in zip(x0, normed)])
    return out[0] if single else out


def ddim_restore(lows, params: EstimatorParams, cfg: ExperimentConfig) -> np.ndarray:
    """Noise the normalized low-dose input to ``ddim_t_start`` and run DDIM to 0."""
    lows = np.asarray(lows, dtype=np.float32)
    sched = schedule(cfg)
    ab = ddpm_alpha_bar(cfg.schedule.t_max)
    t0 = cfg.baseline.ddim_t_start
    outs = []
    for k, low in enumerate(lows):
        x, rec = normalize(low)
        noise = rng_for(_seed64(cfg.seed, 7, k)).standard_normal(x.shape)
        x_t = ddim_forward(x, ab[t0], noise).astype(np.float32)
        x0 = ddim_sample(x_t, lambda z, t: net_forward(params, z, t, sched), ab, t0,
                         cfg.baseline.ddim_steps)
        outs.append(np.maximum(denormalize(x0, rec), 0))
    return np.stack(outs)


def load_models(cfg: ExperimentConfig, out, methods) -> Models:
    ckdir = checkpoint_dir(out)
    models = Models()
    need = set()
    if {"red", "red_nodc"} & set(methods):
        need.add("ren")
    if "red" in methods and cfg.schedule.beta > 0 and not cfg.ablation.no_dc:
        need.add("dcn")
    need |= {m for m in ("oneshot", "ddim") if m in methods}
    for name in sorted(need):
        path = ckdir / f"{name}.redw"
        if not path.exists():
            raise MissingPrerequisite(f"checkpoint {path} is required for {sorted(methods)}")
        setattr(models, name, load_checkpoint(path, cfg))
    return models


def methods_to_run(cfg: ExperimentConfig) -> list[str]:
    methods = []
    if cfg.baseline.osem:
        methods.append("osem")
    if cfg.baseline.fbp:
        methods.append("fbp")
    methods.append("red")
    if cfg.ablation.no_dc:
        methods[-1] = "red_nodc"
    if cfg.baseline.oneshot:
        methods.append("oneshot")
    if cfg.baseline.ddim:
        methods.append("ddim")
    return methods


def restore_sinograms(method: str, lows, models: Models, cfg: ExperimentConfig) -> np.ndarray:
    if method in ("osem", "fbp"):
        return np.asarray(lows, dtype=np.float32)
    if method == "red":
        dcn = None if cfg.ablation.no_dc else models.dcn
        return red_restore(lows, models.ren, dcn, cfg)
    if method == "red_nodc":
        return red_restore(lows, models.ren, None, cfg, beta=0.0)
    if method == "oneshot":
        return red_restore(lows, models.oneshot, None, cfg, t_s=1, beta=0.0)
    if method == "ddim":
        return ddim_restore(lows, models.ddim, cfg)
    raise ValueError(f"unknown method {method!r}")


def image_from_sinogram(method: str, sino, cfg: ExperimentConfig) -> np.ndarray:
    geom = geometry(cfg)
    if method == "osem":
        return tomo.osem(sino, geom, cfg.baseline.osem_iters, cfg.baseline.osem_subsets)
    return tomo.fbp(sino, geom, cfg.baseline.fbp_filter, clip_negative=True)


def _recon_chunk(job, cfg, out, models):
    method, drf, items = job
    lows = np.stack([low for _, low in items])
    sinos = restore_sinograms(method, lows, models, cfg)
    d = Path(out) / "recon" / method / drf_tag(drf)
    for (idx, _), sino in zip(items, sinos):
        img = image_from_sinogram(method, sino, cfg)
        write_rsf(d / f"s{idx:05d}_sino.rsf", sino.astype(np.float32), KIND_SINOGRAM)
        write_rsf(d / f"s{idx:05d}_image.rsf", img.astype(np.float32), KIND_IMAGE)
    return len(items)


def test_inputs(cfg: ExperimentConfig, out, drf: float) -> list[tuple[int, np.ndarray]]:
    data = load_split(out, "test", drf)
    items = []
    for d in data:
        low = d.low
        if cfg.mixed.mode != "none":
            low = noisy_input(low, cfg.mixed.sigma, _slice_seeds(cfg.seed, "test", d.idx, drf) ^ 1)
        items.append((d.idx, low))
    return items


def reconstruct_all(cfg: ExperimentConfig, out, methods=None) -> list[str]:
    """Reconstruct every held-out slice at every evaluation DRF."""
    methods = list(methods or methods_to_run(cfg))
    models = load_models(cfg, out, methods)
    jobs = []
    for drf in cfg.eval_drfs:
        items = test_inputs(cfg, out, drf)
        for method in methods:
            for i in range(0, len(items), RECON_CHUNK):
                jobs.append((method, drf, items[i : i + RECON_CHUNK]))
    pmap(partial(_recon_chunk, cfg=cfg, out=out, models=models), jobs, worker_count(cfg))
    return methods


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def evaluate(cfg: ExperimentConfig, out, methods=None) -> dict[float, MetricsReport]:
    """Per-DRF metric CSVs in ``reports/`` plus previews and profile lines.

    Sinograms are compared with the full-dose sinogram, images with the
    phantom.  Methods without reconstructions are skipped with a warning.
    """
    out = Path(out)
    methods = list(cfg.eval.methods if methods is None else methods)
    reports_dir = out / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / "metrics_meta.txt").write_text(
        f"{NRMSE_CONVENTION}\npsnr data_range = reference maximum\n"
        "ssim = 11x11 gaussian window, sigma 1.5\n"
        "sinogram reference = full-dose sinogram; image reference = phantom\n")
    mask = None
    if cfg.eval.mask:
        mask = read_rsf(cfg.eval.mask)[0].astype(np.float64)
    reports = {}
    for drf in cfg.eval_drfs:
        report = MetricsReport()
        tag = drf_tag(drf)
        data = load_split(out, "test", drf) if methods else []
        present = []
        for method in methods:
            d = out / "recon" / method / tag
            if not d.is_dir():
                log.warning("no reconstructions for method %r at %s; skipped", method, tag)
                continue
            present.append(method)
        for sd in data:
            for method in present:
                d = out / "recon" / method / tag
                sino_path, img_path = d / f"s{sd.idx:05d}_sino.rsf", d / f"s{sd.idx:05d}_image.rsf"
                if not (sino_path.exists() and img_path.exists()):
                    log.warning("missing output for %s slice %d at %s; skipped", method, sd.idx, tag)
                    continue
                sino, img = read_rsf(sino_path)[0], read_rsf(img_path)[0]
                report.add(sd.idx, "sinogram", method, sino, sd.full)
                ref = sd.image if mask is None else sd.image * mask
                report.add(sd.idx, "image", method, img if mask is None else img * mask, ref)
        report.write_csv(reports_dir / f"metrics_{tag}.csv")
        if cfg.eval.previews and data and present:
            _write_previews(out, cfg, tag, data[0], present)
        reports[drf] = report
    return reports


def _write_previews(out: Path, cfg, tag, sd: SliceData, methods):
    pdir = out / "reports" / "previews"
    vmax_s, vmax_i = float(sd.full.max()), float(sd.image.max())
    write_pgm16(pdir / f"{tag}_s{sd.idx:05d}_reference_sino.pgm", sd.full, 0.0, vmax_s)
    write_pgm16(pdir / f"{tag}_s{sd.idx:05d}_reference_image.pgm", sd.image, 0.0, vmax_i)
    row = sd.image.shape[0] // 2
    columns = {"reference": sd.image[row]}
    for method in methods:
        d = out / "recon" / method / tag
        sino = read_rsf(d / f"s{sd.idx:05d}_sino.rsf")[0]
        img = read_rsf(d / f"s{sd.idx:05d}_image.rsf")[0]
        write_pgm16(pdir / f"{tag}_s{sd.idx:05d}_{method}_sino.pgm", sino, 0.0, vmax_s)
        write_pgm16(pdir / f"{tag}_s{sd.idx:05d}_{method}_image.pgm", img, 0.0, vmax_i)
        columns[method] = img[row]
    prof = out / "reports" / "profiles" / f"{tag}_s{sd.idx:05d}_row{row}.csv"
    prof.parent.mkdir(parents=True, exist_ok=True)
    with open(prof, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pixel"] + list(columns))
        for j in range(sd.image.shape[1]):
            w.writerow([j] + [f"{columns[m][j]:.6g}" for m in columns])


# --------------------------------------------------------------------------
# Ablation
# --------------------------------------------------------------------------


@dataclass
class AblationResult:
    """Per-seed, per-variant, per-slice sinogram and image metrics."""

    rows: list

    def mean(self, variant: str, key: str = "sino_psnr", seed: int | None = None) -> float:
        vals = [r[key] for r in self.rows if r["variant"] == variant and (seed is None or r["seed"] == seed)]
        return float(np.mean(vals))


def _train_or_load(path: Path, fn, key: str):
    """Reuse ``path`` when its ``.key`` sidecar matches ``key``; otherwise train and save."""
    key_path = path.with_suffix(".key")
    if path.exists() and key_path.exists() and key_path.read_text() == key:
        return load_params(path)
    params, trace = fn()
    path.parent.mkdir(parents=True, exist_ok=True)
    save_params(path, params)
    write_loss_csv(path.with_name(path.stem + "_loss.csv"), trace)
    key_path.write_text(key)
    return params


def ablation_models(cfg: ExperimentConfig, out, seed: int, pairs=None) -> dict[str, EstimatorParams]:
    """Train (or reuse) the four networks behind the ablation variants for one seed."""
    d = Path(out) / "ablation" / f"seed{seed}"
    sched = schedule(cfg)
    pairs = pairs if pairs is not None else training_pairs(cfg, out)
    full_cfg = train_config(cfg, seed)
    nosl_cfg = train_config(cfg, seed, w_ssim=0.0)
    dcn_steps = _steps(cfg.stages.dcn_steps, cfg.train.n_steps)
    # everything that shapes the trained weights
    base = f"{cfg.seed} {cfg.data} {cfg.schedule.kind} {cfg.schedule.t_max} {cfg.net}"
    nets = {}
    nets["ren"] = _train_or_load(d / "ren.redw", lambda: train_ren(pairs, full_cfg, sched, cfg.net),
                                 f"{base} {full_cfg}\n")
    nets["ren_nosl"] = _train_or_load(d / "ren_nosl.redw",
                                      lambda: train_ren(pairs, nosl_cfg, sched, cfg.net),
                                      f"{base} {nosl_cfg}\n")
    nets["dcn"] = _train_or_load(d / "dcn.redw", lambda: train_dcn(
        pairs, nets["ren"], replace(full_cfg, n_steps=dcn_steps), sched, cfg.net),
        f"{base} {full_cfg} dcn {dcn_steps}\n")
    nets["dcn_nosl"] = _train_or_load(d / "dcn_nosl.redw", lambda: train_dcn(
        pairs, nets["ren_nosl"], replace(nosl_cfg, n_steps=dcn_steps), sched, cfg.net),
        f"{base} {nosl_cfg} dcn {dcn_steps}\n")
    return nets


def run_ablation(cfg: ExperimentConfig, out) -> AblationResult:
    """Evaluate the four variants on held-out slices at ``ablation.drf`` for every seed."""
    out = Path(out)
    pairs = training_pairs(cfg, out)
    test = load_split(out, "test", cfg.ablation.drf)
    if not test:
        raise MissingPrerequisite("no held-out slices at the ablation DRF")
    lows = np.stack([d.low for d in test])
    geom = geometry(cfg)
    rows = []
    for seed in cfg.ablation.seeds:
        nets = ablation_models(cfg, out, seed, pairs)
        setups = {
            "w/o DC+SL": (nets["ren_nosl"], None),
            "w/o DC": (nets["ren"], None),
            "w/o SL": (nets["ren_nosl"], nets["dcn_nosl"]),
            "RED": (nets["ren"], nets["dcn"]),
        }
        for variant, (ren, dcn) in setups.items():
            beta = None if dcn is not None else 0.0
            sinos = np.concatenate([red_restore(lows[i : i + RECON_CHUNK], ren, dcn, cfg, beta=beta)
                                    for i in range(0, len(lows), RECON_CHUNK)])
            for d, sino in zip(test, sinos):
                img = tomo.fbp(sino, geom, cfg.baseline.fbp_filter, clip_negative=True)
                rep = MetricsReport()
                s_row = rep.add(d.idx, "sinogram", variant, sino, d.full)
                i_row = rep.add(d.idx, "image", variant, img, d.image)
                rows.append({"seed": seed, "variant": variant, "slice": d.idx,
                             "input_psnr": psnr(d.low, d.full),
                             "sino_psnr": s_row["psnr_db"], "sino_ssim": s_row["ssim"],
                             "sino_nrmse": s_row["nrmse"], "img_psnr": i_row["psnr_db"],
                             "img_ssim": i_row["ssim"], "img_nrmse": i_row["nrmse"]})
    result = AblationResult(rows)
    _write_ablation(out / "ablation", result, cfg)
    return result


def _write_ablation(d: Path, result: AblationResult, cfg):
    d.mkdir(parents=True, exist_ok=True)
    keys = ("sino_psnr", "sino_ssim", "sino_nrmse", "img_psnr", "img_ssim", "img_nrmse")
    with open(d / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seeds"] + list(keys))
        for v in ABLATION_VARIANTS:
            w.writerow([v, " ".join(str(s) for s in cfg.ablation.seeds)]
                       + [f"{result.mean(v, k):.6f}" for k in keys])
    with open(d / "ablation_per_slice.csv", "w", newline="") as fh:
        fields = ["seed", "variant", "slice", "input_psnr"] + list(keys)
        w = csv.DictWriter(fh, fields, lineterminator="\n")
        w.writeheader()
        for r in result.rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in fields})
