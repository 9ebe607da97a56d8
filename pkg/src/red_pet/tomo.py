"""Parallel-beam tomography: phantoms, a Joseph-style projector and classical
reconstructors (FBP, MLEM, OSEM).

Images are 2D arrays indexed ``[row, col]``; sinograms are 2D arrays indexed
``[angle, bin]``.  The projector is stored as a sparse system matrix so the
back-projection is its exact transpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

FILTER_KINDS = ("ramp", "ramp-hann")


@dataclass(frozen=True)
class Ellipse:
    """One additive ellipse in field-of-view coordinates ``[-1, 1]^2``."""

    x: float
    y: float
    a: float
    b: float
    intensity: float
    rotation: float = 0.0


@dataclass(frozen=True)
class PhantomSpec:
    ellipses: tuple[Ellipse, ...] = ()


@dataclass(frozen=True)
class ProjectionGeometry:
    """Parallel-beam geometry for a square ``image_size`` grid.

    Detector bins are centred on the rotation axis with pitch ``bin_spacing``
    (pixel units).  View angles lie in ``[0, pi)``.
    """

    image_size: int
    n_angles: int
    n_bins: int
    bin_spacing: float = 1.0
    angles: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.image_size < 1 or self.n_angles < 1 or self.n_bins < 1:
            raise ValueError("geometry dimensions must be >= 1")
        if self.bin_spacing <= 0:
            raise ValueError("bin_spacing must be positive")
        if not self.angles:
            angles = tuple(float(a) for a in np.arange(self.n_angles) * np.pi / self.n_angles)
            object.__setattr__(self, "angles", angles)
        ang = np.asarray(self.angles)
        if ang.size != self.n_angles:
            raise ValueError(f"expected {self.n_angles} angles, got {ang.size}")
        if np.any(np.diff(ang) <= 0) or ang[0] < 0 or ang[-1] >= np.pi:
            raise ValueError("angles must be strictly increasing within [0, pi)")
        diagonal = self.image_size * np.sqrt(2.0)
        if self.n_bins * self.bin_spacing < diagonal:
            raise ValueError(
                f"detector span {self.n_bins * self.bin_spacing:.1f} px is shorter than "
                f"the image diagonal {diagonal:.1f} px"
            )

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_angles, self.n_bins)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)


# --------------------------------------------------------------------------
# Phantoms
# --------------------------------------------------------------------------


def make_phantom(spec: PhantomSpec, width: int, height: int, oversample: int = 4) -> np.ndarray:
    """Rasterize a sum of ellipses onto a ``height x width`` grid.

    Each pixel holds the intensity-weighted fraction of its
    ``oversample x oversample`` sub-samples that fall inside each ellipse.
    Raises ``ValueError`` if the summed image has a negative pixel.
    """
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    sub = (np.arange(oversample) + 0.5) / oversample
    xs = (np.arange(width)[:, None] + sub[None, :]).ravel() * (2.0 / width) - 1.0
    ys = 1.0 - (np.arange(height)[:, None] + sub[None, :]).ravel() * (2.0 / height)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")

    img = np.zeros((height, width))
    for e in spec.ellipses:
        if e.a <= 0 or e.b <= 0:
            raise ValueError(f"ellipse semi-axes must be positive: {e}")
        c, s = np.cos(e.rotation), np.sin(e.rotation)
        dx, dy = xx - e.x, yy - e.y
        u = (c * dx + s * dy) / e.a
        v = (-s * dx + c * dy) / e.b
        inside = (u * u + v * v <= 1.0).astype(np.float64)
        frac = inside.reshape(height, oversample, width, oversample).mean(axis=(1, 3))
        img += e.intensity * frac
    if img.size and img.min() < -1e-12:
        i, j = np.unravel_index(np.argmin(img), img.shape)
        raise ValueError(f"phantom has negative pixel {img[i, j]:.4g} at ({i}, {j})")
    return np.maximum(img, 0.0)


def random_phantom_spec(rng: np.random.Generator, n_organs: int = 4, n_lesions: int = 2) -> PhantomSpec:
    """Draw a torso-like phantom: a body ellipse, organ blobs and hot lesions."""
    body_a, body_b = rng.uniform(0.55, 0.8), rng.uniform(0.45, 0.7)
    ellipses = [Ellipse(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), body_a, body_b,
                        rng.uniform(0.8, 1.2), rng.uniform(-0.3, 0.3))]
    for _ in range(n_organs):
        r = np.sqrt(rng.uniform(0.0, 0.25))
        phi = rng.uniform(0, 2 * np.pi)
        ellipses.append(Ellipse(r * body_a * np.cos(phi), r * body_b * np.sin(phi),
                                rng.uniform(0.08, 0.25), rng.uniform(0.06, 0.2),
                                rng.uniform(0.5, 2.5), rng.uniform(0, np.pi)))
    for _ in range(n_lesions):
        r = np.sqrt(rng.uniform(0.0, 0.4))
        phi = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0.03, 0.07)
        ellipses.append(Ellipse(r * body_a * np.cos(phi), r * body_b * np.sin(phi),
                                rad, rad, rng.uniform(2.0, 5.0)))
    return PhantomSpec(tuple(ellipses))


def disk_phantom(size: int = 64, radius: float = 0.5, intensity: float = 1.0) -> np.ndarray:
    """Centred uniform disk, the reference phantom used across the tests."""
    return make_phantom(PhantomSpec((Ellipse(0.0, 0.0, radius, radius, intensity),)), size, size)


# --------------------------------------------------------------------------
# System matrix
# --------------------------------------------------------------------------


@lru_cache(maxsize=16)
def system_matrix(geom: ProjectionGeometry) -> sp.csr_matrix:
    """Sparse ``(n_angles*n_bins, size*size)`` ray-driven interpolation matrix.

    Each ray is sampled once per image row (or column, whichever is closer to
    perpendicular to the ray) with linear interpolation between the two
    neighbouring pixels, scaled by the per-sample path length.
    """
    n = geom.image_size
    half = (n - 1) / 2.0
    u = (np.arange(geom.n_bins) - (geom.n_bins - 1) / 2.0) * geom.bin_spacing
    line = np.arange(n)
    rows_all, cols_all, vals_all = [], [], []
    for a, theta in enumerate(geom.angles):
        c, s = np.cos(theta), np.sin(theta)
        bins = np.broadcast_to(np.arange(geom.n_bins)[:, None], (geom.n_bins, n))
        if abs(c) >= abs(s):
            # one sample per image row
            y = half - line
            pos = (u[:, None] - y[None, :] * s) / c + half
            fixed = np.broadcast_to(line[None, :], pos.shape)
            step = 1.0 / abs(c)
            by_row = True
        else:
            x = line - half
            pos = half - (u[:, None] - x[None, :] * c) / s
            fixed = np.broadcast_to(line[None, :], pos.shape)
            step = 1.0 / abs(s)
            by_row = False
        lo = np.floor(pos).astype(np.int64)
        frac = pos - lo
        for idx, w in ((lo, 1.0 - frac), (lo + 1, frac)):
            ok = (idx >= 0) & (idx < n) & (w > 0)
            if by_row:
                pix = fixed[ok] * n + idx[ok]
            else:
                pix = idx[ok] * n + fixed[ok]
            rows_all.append(a * geom.n_bins + bins[ok])
            cols_all.append(pix)
            vals_all.append(w[ok] * step)
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    vals = np.concatenate(vals_all)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(geom.n_angles * geom.n_bins, n * n))
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


@lru_cache(maxsize=16)
def _transpose(geom: ProjectionGeometry) -> sp.csr_matrix:
    return system_matrix(geom).T.tocsr()


def _check_image(img: np.ndarray, geom: ProjectionGeometry) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape != geom.image_shape:
        raise ValueError(f"image shape {img.shape} does not match geometry {geom.image_shape}")
    return img


def _check_sino(sino: np.ndarray, geom: ProjectionGeometry) -> np.ndarray:
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape != geom.sino_shape:
        raise ValueError(f"sinogram shape {sino.shape} does not match geometry {geom.sino_shape}")
    return sino


def forward_project(img: np.ndarray, geom: ProjectionGeometry) -> np.ndarray:
    img = _check_image(img, geom)
    return (system_matrix(geom) @ img.ravel()).reshape(geom.sino_shape)


def back_project(sino: np.ndarray, geom: ProjectionGeometry) -> np.ndarray:
    """Exact adjoint of :func:`forward_project`."""
    sino = _check_sino(sino, geom)
    return (_transpose(geom) @ sino.ravel()).reshape(geom.image_shape)


# --------------------------------------------------------------------------
# FBP
# --------------------------------------------------------------------------


def ramp_filter(n_padded: int, kind: str = "ramp", spacing: float = 1.0) -> np.ndarray:
    """Frequency response on the ``np.fft.fftfreq`` grid."""
    if kind not in FILTER_KINDS:
        raise ValueError(f"unknown filter {kind!r}; expected one of {FILTER_KINDS}")
    freq = np.fft.fftfreq(n_padded, d=spacing)
    resp = np.abs(freq)
    if kind == "ramp-hann":
        resp = resp * 0.5 * (1.0 + np.cos(2.0 * np.pi * freq * spacing))
    return resp


def fbp(sino: np.ndarray, geom: ProjectionGeometry, filter_kind: str = "ramp",
        clip_negative: bool = False) -> np.ndarray:
    sino = _check_sino(sino, geom)
    if geom.n_angles < 2:
        raise ValueError("FBP needs at least 2 angles")
    if geom.n_bins < 4:
        raise ValueError("FBP filtering needs at least 4 detector bins")
    n_pad = 1 << int(np.ceil(np.log2(2 * geom.n_bins)))
    resp = ramp_filter(n_pad, filter_kind, geom.bin_spacing)
    spec = np.fft.fft(sino, n=n_pad, axis=1)
    filtered = np.real(np.fft.ifft(spec * resp, axis=1))[:, : geom.n_bins]
    img = back_project(filtered, geom) * (geom.bin_spacing * np.pi / geom.n_angles)
    if clip_negative:
        img = np.maximum(img, 0.0)
    return img


# --------------------------------------------------------------------------
# EM reconstructors
# --------------------------------------------------------------------------


def poisson_loglik(sino: np.ndarray, expected: np.ndarray) -> float:
    """Poisson log-likelihood up to the constant ``-log(b!)`` term.

    Bins with ``expected == 0`` contribute 0 when ``sino == 0`` and ``-inf``
    otherwise.
    """
    sino = np.asarray(sino, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    pos = expected > 0
    if np.any(sino[~pos] > 0):
        return -np.inf
    return float(np.sum(sino[pos] * np.log(expected[pos]) - expected[pos]))


def _em_update(x, b, mat, mat_t):
    proj = mat @ x
    ratio = np.zeros_like(proj)
    np.divide(b, proj, out=ratio, where=proj > 0)
    sens = mat_t @ np.ones(mat.shape[0])
    corr = mat_t @ ratio
    out = x.copy()
    np.divide(x * corr, sens, out=out, where=sens > 0)
    return out


def _validate_em_inputs(sino, geom, init):
    b = _check_sino(sino, geom)
    if np.any(b < 0):
        raise ValueError("EM reconstruction requires a nonnegative sinogram")
    if init is None:
        x = np.ones(geom.image_shape)
    else:
        x = _check_image(init, geom).copy()
        if np.any(x <= 0):
            raise ValueError("EM initial image must be strictly positive")
    return b, x


def mlem(sino: np.ndarray, geom: ProjectionGeometry, n_iters: int = 50,
         init: np.ndarray | None = None, callback=None) -> np.ndarray:
    """Multiplicative MLEM.  ``callback(k, x)`` is invoked after every iteration."""
    b, x = _validate_em_inputs(sino, geom, init)
    mat, mat_t = system_matrix(geom), _transpose(geom)
    b = b.ravel()
    x = x.ravel()
    for k in range(n_iters):
        x = _em_update(x, b, mat, mat_t)
        if callback is not None:
            callback(k, x.reshape(geom.image_shape))
    return x.reshape(geom.image_shape)


@lru_cache(maxsize=16)
def _subset_operators(geom: ProjectionGeometry, n_subsets: int):
    mat = system_matrix(geom)
    ops = []
    for s in range(n_subsets):
        angles = np.arange(s, geom.n_angles, n_subsets)
        rows = (angles[:, None] * geom.n_bins + np.arange(geom.n_bins)[None, :]).ravel()
        sub = mat[rows]
        ops.append((rows, sub, sub.T.tocsr()))
    return ops


def osem(sino: np.ndarray, geom: ProjectionGeometry, n_iters: int = 10, n_subsets: int = 4,
         init: np.ndarray | None = None, callback=None) -> np.ndarray:
    """Ordered-subset EM with angle-interleaved subsets.

    ``n_iters`` counts full passes over all subsets; ``callback(k, x)`` runs
    after each full pass.
    """
    if n_subsets < 1 or n_subsets > geom.n_angles:
        raise ValueError(f"n_subsets must be in [1, {geom.n_angles}], got {n_subsets}")
    b, x = _validate_em_inputs(sino, geom, init)
    b = b.ravel()
    x = x.ravel()
    ops = _subset_operators(geom, n_subsets)
    for k in range(n_iters):
        for rows, sub, sub_t in ops:
            x = _em_update(x, b[rows], sub, sub_t)
        if callback is not None:
            callback(k, x.reshape(geom.image_shape))
    return x.reshape(geom.image_shape)
