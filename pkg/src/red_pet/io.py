"""File formats: RSF array containers, 16-bit PGM previews, loss/profile CSVs."""

from __future__ import annotations

import csv
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .dose import ScaleRecord

RSF_MAGIC = b"RSF1"
KIND_IMAGE = 0
KIND_SINOGRAM = 1
_HEADER = struct.Struct("<4sIIIdd")


class RSFError(ValueError):
    pass


def dumps_rsf(array: np.ndarray, kind: int, record: ScaleRecord | None = None) -> bytes:
    array = np.asarray(array)
    if array.ndim != 2:
        raise RSFError(f"RSF holds 2D arrays, got shape {array.shape}")
    if kind not in (KIND_IMAGE, KIND_SINOGRAM):
        raise RSFError(f"unknown RSF kind {kind}")
    if not np.all(np.isfinite(array)):
        raise RSFError("RSF payload must be finite")
    record = record or ScaleRecord()
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    head = _HEADER.pack(RSF_MAGIC, kind, array.shape[0], array.shape[1], record.scale, record.offset)
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def loads_rsf(blob: bytes) -> tuple[np.ndarray, int, ScaleRecord]:
    """Parse an RSF blob into ``(float32 array, kind, scale record)``."""
    if len(blob) < _HEADER.size + 4:
        raise RSFError("RSF blob is truncated")
    magic, kind, d0, d1, scale, offset = _HEADER.unpack_from(blob)
    if magic != RSF_MAGIC:
        raise RSFError("bad RSF magic")
    if kind not in (KIND_IMAGE, KIND_SINOGRAM):
        raise RSFError(f"unknown RSF kind {kind}")
    n = d0 * d1 * 4
    if len(blob) != _HEADER.size + n + 4:
        raise RSFError(f"RSF payload length {len(blob) - _HEADER.size - 4} does not match {d0}x{d1}")
    payload = blob[_HEADER.size : _HEADER.size + n]
    (crc,) = struct.unpack_from("<I", blob, _HEADER.size + n)
    if zlib.crc32(payload) != crc:
        raise RSFError("RSF checksum mismatch")
    arr = np.frombuffer(payload, dtype="<f4").reshape(d0, d1).astype(np.float32)
    return arr, kind, ScaleRecord(scale, offset)


def write_rsf(path, array, kind: int, record: ScaleRecord | None = None) -> None:
    _atomic_write(path, dumps_rsf(array, kind, record))


def read_rsf(path) -> tuple[np.ndarray, int, ScaleRecord]:
    with open(path, "rb") as fh:
        return loads_rsf(fh.read())


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_pgm16(path, array, vmin: float | None = None, vmax: float | None = None) -> None:
    """Binary 16-bit PGM, linearly windowed to ``[vmin, vmax]``."""
    a = np.asarray(array, dtype=np.float64)
    lo = float(a.min()) if vmin is None else vmin
    hi = float(a.max()) if vmax is None else vmax
    scaled = np.zeros_like(a) if hi <= lo else np.clip((a - lo) / (hi - lo), 0.0, 1.0)
    data = np.round(scaled * 65535).astype(">u2")
    head = f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode("ascii")
    _atomic_write(path, head + data.tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 65535:
        raise ValueError("not a 16-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 2], dtype=">u2").reshape(h, w)


def write_loss_csv(path, trace) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_total", "loss_mse", "loss_ssim"])
        for step, total, mse, ssim in trace:
            w.writerow([step, repr(float(total)), repr(float(mse)), repr(float(ssim))])


def read_loss_csv(path) -> list[tuple[int, float, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["loss_total"]), float(r["loss_mse"]), float(r["loss_ssim"]))
            for r in rows]
