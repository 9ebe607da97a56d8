"""Time-conditioned CNN used for both residual estimation and drift correction.

A plain stack of same-padded convolutions with SiLU activations.  The
diffusion time enters as sinusoidal features of ``alpha(t)``, projected to the
first layer's channels and added after the first convolution.  Gradients are
computed by hand; activations are kept channels-last so every convolution is
a single im2col matmul.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .schedule import ResidualSchedule

ACTIVATIONS = ("silu", "relu", "identity")
_MAGIC = b"REDW"
_VERSION = 1


@dataclass(frozen=True)
class NetArch:
    widths: tuple[int, ...] = (1, 16, 32, 32, 16, 1)
    kernel: int = 3
    temb_dim: int = 16
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("architecture needs at least one layer")
        if self.widths[0] != 1 or self.widths[-1] != 1:
            raise ValueError("input and output must be single-channel")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be a positive odd integer")
        if self.temb_dim < 2 or self.temb_dim % 2:
            raise ValueError("temb_dim must be a positive even integer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    def segments(self) -> list[tuple[str, tuple[int, ...]]]:
        k2 = self.kernel * self.kernel
        segs = []
        for l in range(self.depth):
            cin, cout = self.widths[l], self.widths[l + 1]
            segs.append((f"conv{l}.w", (cin * k2, cout)))
            segs.append((f"conv{l}.b", (cout,)))
        segs.append(("temb.w", (self.temb_dim, self.widths[1])))
        segs.append(("temb.b", (self.widths[1],)))
        return segs

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.segments())


@dataclass
class EstimatorParams:
    arch: NetArch
    flat: np.ndarray

    def __post_init__(self):
        if self.flat.ndim != 1 or self.flat.size != self.arch.n_params:
            raise ValueError(f"expected {self.arch.n_params} parameters, got {self.flat.shape}")

    @property
    def dtype(self):
        return self.flat.dtype

    def views(self, flat: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Named reshaped views into ``flat`` (defaults to the parameters)."""
        flat = self.flat if flat is None else flat
        out, pos = {}, 0
        for name, shape in self.arch.segments():
            size = int(np.prod(shape))
            out[name] = flat[pos : pos + size].reshape(shape)
            pos += size
        return out

    def astype(self, dtype) -> "EstimatorParams":
        return EstimatorParams(self.arch, self.flat.astype(dtype))


def net_init(arch: NetArch, seed: int = 0, dtype=np.float32, out_scale: float = 1.0) -> EstimatorParams:
    """He-normal kernels (``std = sqrt(2 / fan_in)``), zero biases.

    ``out_scale`` multiplies the output layer's kernel; ``0`` gives a network
    that starts as the zero map.
    """
    rng = np.random.default_rng(seed)
    params = EstimatorParams(arch, np.zeros(arch.n_params, dtype=np.float64))
    last = f"conv{arch.depth - 1}.w"
    for name, view in params.views().items():
        if name.endswith(".w"):
            view[...] = rng.normal(0.0, np.sqrt(2.0 / view.shape[0]), size=view.shape)
    params.views()[last][...] *= out_scale
    return params.astype(dtype)


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


def time_features(alpha, dim: int) -> np.ndarray:
    """Sinusoidal features of ``alpha`` with frequencies from 1 to 200 rad."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    freqs = np.exp(np.linspace(0.0, np.log(200.0), dim // 2))
    ang = alpha[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _act(z, kind):
    if kind == "silu":
        return z * expit(z)
    if kind == "relu":
        return np.maximum(z, 0)
    return z


def _act_grad(z, kind):
    if kind == "silu":
        s = expit(z)
        return s * (1.0 + z * (1.0 - s))
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


def _im2col(h, k):
    """``(B, H, W, C)`` -> ``(B*H*W, k*k*C)`` with zero 'same' padding.

    Columns are ordered (kernel row, kernel col, channel).
    """
    p = k // 2
    b, hh, ww, c = h.shape
    if k == 1:
        return h.reshape(b * hh * ww, c)
    padded = np.pad(h, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((b, hh, ww, k * k * c), dtype=h.dtype)
    for i in range(k):
        for j in range(k):
            o = (i * k + j) * c
            cols[..., o : o + c] = padded[:, i : i + hh, j : j + ww, :]
    return cols.reshape(b * hh * ww, k * k * c)


def _col2im(cols, shape, k):
    """Adjoint of :func:`_im2col`."""
    b, hh, ww, c = shape
    p = k // 2
    if k == 1:
        return cols.reshape(shape)
    cols = cols.reshape(b, hh, ww, k * k * c)
    out = np.zeros((b, hh + 2 * p, ww + 2 * p, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            o = (i * k + j) * c
            out[:, i : i + hh, j : j + ww, :] += cols[..., o : o + c]
    return out[:, p : p + hh, p : p + ww, :]


def _prepare(params, x, t, sched):
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (H, W) or (B, H, W) input, got shape {x.shape}")
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    emb = time_features(sched.alpha(t_arr), params.arch.temb_dim).astype(params.dtype)
    return x.astype(params.dtype, copy=False), emb, single


def net_forward_cached(params: EstimatorParams, x, t, sched: ResidualSchedule):
    """Forward pass returning ``(output, cache)`` for :func:`net_backward`."""
    arch = params.arch
    p = params.views()
    x, emb, single = _prepare(params, x, t, sched)
    b, hh, ww = x.shape
    h = x[..., None]
    cols_list, z_list, shapes = [], [], []
    for l in range(arch.depth):
        cols = _im2col(h, arch.kernel)
        z = cols @ p[f"conv{l}.w"] + p[f"conv{l}.b"]
        z = z.reshape(b, hh, ww, -1)
        if l == 0:
            z = z + (emb @ p["temb.w"] + p["temb.b"])[:, None, None, :]
        cols_list.append(cols)
        z_list.append(z)
        shapes.append(h.shape)
        h = _act(z, arch.activation) if l < arch.depth - 1 else z
    out = h[..., 0]
    cache = {"cols": cols_list, "z": z_list, "shapes": shapes, "emb": emb, "single": single}
    return (out[0] if single else out), cache


def net_forward(params: EstimatorParams, x, t, sched: ResidualSchedule) -> np.ndarray:
    """Predict a residual field with the same spatial shape as ``x``.

    ``x`` is ``(H, W)`` or a batch ``(B, H, W)``; ``t`` is a scalar or one
    time per batch entry.
    """
    return net_forward_cached(params, x, t, sched)[0]


def net_backward(params: EstimatorParams, x, t, upstream, sched: ResidualSchedule,
                 cache=None) -> np.ndarray:
    """Gradient of ``sum(upstream * net_forward(params, x, t))`` w.r.t. the flat parameters."""
    arch = params.arch
    if cache is None:
        _, cache = net_forward_cached(params, x, t, sched)
    g = np.asarray(upstream, dtype=params.dtype)
    if cache["single"]:
        g = g[None]
    b, hh, ww, _ = cache["shapes"][0]
    if g.shape != (b, hh, ww):
        raise ValueError(f"upstream gradient shape {np.shape(upstream)} does not match output")
    p = params.views()
    grad = np.zeros_like(params.flat)
    gv = params.views(grad)
    g = g[..., None]
    for l in reversed(range(arch.depth)):
        z = cache["z"][l]
        if l < arch.depth - 1:
            g = g * _act_grad(z, arch.activation)
        g2 = g.reshape(-1, g.shape[-1])
        gv[f"conv{l}.w"][...] = cache["cols"][l].T @ g2
        gv[f"conv{l}.b"][...] = g2.sum(axis=0)
        if l == 0:
            per_sample = g.sum(axis=(1, 2))
            gv["temb.w"][...] = cache["emb"].T @ per_sample
            gv["temb.b"][...] = per_sample.sum(axis=0)
        else:
            dcols = g2 @ p[f"conv{l}.w"].T
            g = _col2im(dcols, cache["shapes"][l], arch.kernel)
    return grad


# --------------------------------------------------------------------------
# AdamW
# --------------------------------------------------------------------------


@dataclass
class OptState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-2
    decay_interval: int = 100_000
    decay_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def current_lr(self) -> float:
        return self.lr * self.decay_factor ** (self.step // self.decay_interval)


def adamw_init(params: EstimatorParams, **kwargs) -> OptState:
    return OptState(np.zeros_like(params.flat), np.zeros_like(params.flat), **kwargs)


def adamw_step(flat: np.ndarray, grads: np.ndarray, opt: OptState) -> tuple[np.ndarray, OptState]:
    """One AdamW update with decoupled weight decay and bias correction.

    The learning rate used is ``opt.current_lr()``, i.e. it is multiplied by
    ``decay_factor`` every ``decay_interval`` steps.  Returns new arrays; the
    inputs are not modified.
    """
    if grads.shape != flat.shape or opt.m.shape != flat.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise FloatingPointError(f"non-finite gradient at {bad.size} entries (first index {bad[0]})")
    lr = opt.current_lr()
    step = opt.step + 1
    m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grads
    v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grads * grads
    m_hat = m / (1.0 - opt.beta1**step)
    v_hat = v / (1.0 - opt.beta2**step)
    new = flat * (1.0 - lr * opt.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    dt = flat.dtype
    return new.astype(dt, copy=False), replace(opt, m=m.astype(dt, copy=False),
                                                v=v.astype(dt, copy=False), step=step)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def dumps_params(params: EstimatorParams) -> bytes:
    """Serialize to the REDW blob: header, arch, float32 parameters, CRC32."""
    arch = params.arch
    head = _MAGIC + struct.pack("<II", _VERSION, len(arch.widths))
    head += struct.pack(f"<{len(arch.widths)}I", *arch.widths)
    head += struct.pack("<III", arch.kernel, arch.temb_dim, ACTIVATIONS.index(arch.activation))
    head += struct.pack("<Q", arch.n_params)
    body = head + params.flat.astype("<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def loads_params(blob: bytes) -> EstimatorParams:
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise CheckpointError("not a REDW checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("REDW checkpoint checksum mismatch")
    version, n_w = struct.unpack_from("<II", body, 4)
    if version != _VERSION:
        raise CheckpointError(f"unsupported REDW version {version}")
    pos = 12
    widths = struct.unpack_from(f"<{n_w}I", body, pos)
    pos += 4 * n_w
    kernel, temb_dim, act = struct.unpack_from("<III", body, pos)
    pos += 12
    (n_params,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    arch = NetArch(widths, kernel, temb_dim, ACTIVATIONS[act])
    if n_params != arch.n_params or len(body) - pos != 4 * n_params:
        raise CheckpointError("REDW parameter count does not match its architecture")
    flat = np.frombuffer(body, dtype="<f4", count=n_params, offset=pos).astype(np.float32)
    return EstimatorParams(arch, flat)


def save_params(path, params: EstimatorParams) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(dumps_params(params))
    os.replace(tmp, path)


def load_params(path) -> EstimatorParams:
    with open(path, "rb") as fh:
        return loads_params(fh.read())
