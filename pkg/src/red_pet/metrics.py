"""PSNR, SSIM and NRMSE, plus the differentiable SSIM used as a training loss."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

SSIM_MODES = ("global", "windowed")
REPORT_HEADER = ("slice", "domain", "method", "psnr_db", "ssim", "nrmse")
NRMSE_CONVENTION = "nrmse = ||x - ref||_2 / ||ref||_2"


@dataclass(frozen=True)
class SSIMConfig:
    """SSIM stabilizing constants and statistics mode.

    The defaults correspond to ``c1 = (0.01 R)^2`` and ``c2 = (0.03 R)^2`` for a
    data range ``R = 1``.  ``windowed`` uses an 11x11 Gaussian window with
    sigma 1.5 and averages the SSIM map over windows fully inside the image.
    """

    c1: float = 1e-4
    c2: float = 9e-4
    mode: str = "global"
    sigma: float = 1.5
    truncate: float = 3.5

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("SSIM constants must be positive")
        if self.mode not in SSIM_MODES:
            raise ValueError(f"unknown SSIM mode {self.mode!r}")

    @classmethod
    def for_range(cls, data_range: float, mode: str = "windowed") -> "SSIMConfig":
        return cls((0.01 * data_range) ** 2, (0.03 * data_range) ** 2, mode)

    @property
    def radius(self) -> int:
        return int(self.truncate * self.sigma + 0.5)


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, ref, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the inputs are identical.

    ``data_range`` defaults to ``ref.max()``.
    """
    x, ref = _pair(x, ref)
    if data_range is None:
        data_range = float(ref.max())
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def nrmse(x, ref) -> float:
    x, ref = _pair(x, ref)
    denom = float(np.linalg.norm(ref))
    if denom == 0.0:
        raise ValueError("nrmse is undefined for an all-zero reference")
    return float(np.linalg.norm(x - ref)) / denom


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------


def _ssim_global(x, y, cfg, need_grad):
    n = x.size
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    cxy = np.mean(dx * dy)
    a = 2 * mx * my + cfg.c1
    b = 2 * cxy + cfg.c2
    c = mx * mx + my * my + cfg.c1
    d = vx + vy + cfg.c2
    s = (a * b) / (c * d)
    if not need_grad:
        return s, None
    grad = s * ((2 * my / a - 2 * mx / c) / n + 2.0 * (dy / b - dx / d) / n)
    return s, grad


def _ssim_windowed(x, y, cfg, need_grad):
    r = cfg.radius
    if min(x.shape) <= 2 * r:
        raise ValueError(f"windowed SSIM needs images larger than {2 * r + 1} pixels per side")

    def blur(img):
        return gaussian_filter(img, cfg.sigma, mode="constant", truncate=cfg.truncate)

    mx, my = blur(x), blur(y)
    exx, eyy, exy = blur(x * x), blur(y * y), blur(x * y)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a = 2 * mx * my + cfg.c1
    b = 2 * cxy + cfg.c2
    c = mx * mx + my * my + cfg.c1
    d = vx + vy + cfg.c2
    smap = (a * b) / (c * d)
    crop = (slice(r, x.shape[0] - r), slice(r, x.shape[1] - r))
    value = float(smap[crop].mean())
    if not need_grad:
        return value, None
    w = np.zeros_like(x)
    w[crop] = 1.0 / smap[crop].size
    ws = w * smap
    d_mx = ws * (2 * my / a - 2 * my / b - 2 * mx / c + 2 * mx / d)
    d_exx = -ws / d
    d_exy = 2 * ws / b
    # the zero-padded symmetric Gaussian blur is self-adjoint
    grad = blur(d_mx) + 2 * x * blur(d_exx) + y * blur(d_exy)
    return value, grad


def ssim_with_grad(x, y, cfg: SSIMConfig = SSIMConfig()) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to ``x``."""
    x, y = _pair(x, y)
    fn = _ssim_global if cfg.mode == "global" else _ssim_windowed
    s, g = fn(x, y, cfg, True)
    return float(s), g


def ssim(x, ref, cfg: SSIMConfig | None = None) -> float:
    """SSIM between ``x`` and ``ref``.

    Without ``cfg`` the windowed mode is used with constants derived from the
    reference's maximum as data range.
    """
    x, ref = _pair(x, ref)
    if cfg is None:
        peak = float(ref.max())
        cfg = SSIMConfig.for_range(peak if peak > 0 else 1.0)
    fn = _ssim_global if cfg.mode == "global" else _ssim_windowed
    return float(fn(x, ref, cfg, False)[0])


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-slice metric rows with a per-(domain, method) mean."""

    rows: list = field(default_factory=list)

    def add(self, slice_id, domain: str, method: str, x, ref) -> dict:
        ref = np.asarray(ref, dtype=np.float64)
        peak = float(ref.max())
        row = {
            "slice": str(slice_id),
            "domain": domain,
            "method": method,
            "psnr_db": psnr(x, ref, peak),
            "ssim": ssim(x, ref, SSIMConfig.for_range(peak)),
            "nrmse": nrmse(x, ref),
        }
        self.rows.append(row)
        return row

    def aggregate(self) -> list[dict]:
        groups: dict[tuple[str, str], list[dict]] = {}
        for row in self.rows:
            groups.setdefault((row["domain"], row["method"]), []).append(row)
        out = []
        for (domain, method), rows in groups.items():
            out.append({
                "slice": "MEAN",
                "domain": domain,
                "method": method,
                "psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
                "ssim": float(np.mean([r["ssim"] for r in rows])),
                "nrmse": float(np.mean([r["nrmse"] for r in rows])),
            })
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_HEADER)
            for row in self.rows + self.aggregate():
                writer.writerow([row["slice"], row["domain"], row["method"],
                                 _fmt(row["psnr_db"]), _fmt(row["ssim"]), _fmt(row["nrmse"])])


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.6f}"
