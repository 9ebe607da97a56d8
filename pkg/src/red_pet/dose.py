"""Low-dose simulation by Poisson thinning, plus per-slice max normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DoseConfig:
    """Thinning parameters.

    ``count_scale`` is the expected total number of counts in the full-dose
    sinogram; a dose reduction factor ``drf`` keeps ``1/drf`` of them.
    """

    drf: float = 20.0
    count_scale: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if not self.drf >= 1:
            raise ValueError(f"drf must be >= 1, got {self.drf}")
        if not self.count_scale > 0:
            raise ValueError(f"count_scale must be > 0, got {self.count_scale}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


@dataclass(frozen=True)
class ScaleRecord:
    scale: float = 1.0
    offset: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")


def rng_for(seed: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def simulate_low_dose(full: np.ndarray, cfg: DoseConfig) -> np.ndarray:
    """Thin a full-dose sinogram to ``1/drf`` of its counts.

    The counts are drawn in row-major bin order from a Philox stream keyed by
    ``cfg.seed`` and rescaled back to full-dose magnitude, so the result is an
    unbiased, noisier estimate of ``full``.
    """
    full = np.asarray(full)
    work = full.astype(np.float64)
    if np.any(work < 0):
        raise ValueError("full-dose sinogram has negative bins")
    total = work.sum()
    if total == 0:
        return np.zeros_like(full)
    lam = work * (cfg.count_scale / (cfg.drf * total))
    counts = rng_for(cfg.seed).poisson(lam)
    out = counts * (cfg.drf / cfg.count_scale * total)
    return out.astype(full.dtype if full.dtype.kind == "f" else np.float64)


def normalize(sino: np.ndarray) -> tuple[np.ndarray, ScaleRecord]:
    """Max-scale into ``[0, 1]``.

    The division is carried out in float64; :func:`denormalize` casts back to
    the source dtype, which makes the round trip exact for float32 inputs.
    """
    sino = np.asarray(sino)
    peak = float(np.max(sino)) if sino.size else 0.0
    if not peak > 0:
        raise ValueError("cannot normalize a sinogram whose maximum is not positive")
    rec = ScaleRecord(scale=peak, offset=0.0, dtype=str(sino.dtype))
    return apply_scale(sino, rec), rec


def apply_scale(sino: np.ndarray, rec: ScaleRecord) -> np.ndarray:
    """Normalize ``sino`` with an existing record (e.g. the low-dose partner's)."""
    return (np.asarray(sino, dtype=np.float64) - rec.offset) / rec.scale


def denormalize(sino: np.ndarray, rec: ScaleRecord) -> np.ndarray:
    out = np.asarray(sino, dtype=np.float64) * rec.scale + rec.offset
    return out.astype(rec.dtype)
