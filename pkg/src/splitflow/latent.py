"""Latent tensors and the channel-wise geometry used by projection and aggregation.

A latent is a float64 ``numpy`` array of shape ``(C, H, W)``. Velocities share
the same representation. Channel maps are ``(H, W)`` arrays produced by
reducing over the channel axis.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError

DEFAULT_TOL = 1e-12
MAGIC = b"SFLT"
_HEADER = struct.Struct("<4sIII")


def as_latent(x, name="latent") -> np.ndarray:
    """Validate and convert ``x`` to a finite float64 ``(C, H, W)`` array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise DimensionError(f"{name} must have shape (C, H, W) with all dims >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return arr


def _same_shape(a: np.ndarray, b: np.ndarray, what="operands"):
    if a.shape != b.shape:
        raise DimensionError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def noise_interpolate(x0, eps, sigma: float) -> np.ndarray:
    """Point on the straight path between clean ``x0`` (sigma=0) and noise ``eps`` (sigma=1)."""
    x0 = as_latent(x0, "x0")
    eps = as_latent(eps, "eps")
    _same_shape(x0, eps)
    if not 0.0 <= sigma <= 1.0:
        raise DomainError(f"sigma must lie in [0, 1], got {sigma}")
    return (1.0 - sigma) * x0 + sigma * eps


def channel_inner(a, b) -> np.ndarray:
    a = as_latent(a, "a")
    b = as_latent(b, "b")
    _same_shape(a, b)
    return np.einsum("chw,chw->hw", a, b)


def channel_norm(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(np.einsum("chw,chw->hw", x, x))


def channel_normalize(x, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Scale every spatial column to unit channel norm; columns with norm <= tol become zero."""
    x = as_latent(x, "x")
    norm = channel_norm(x)
    ok = norm > tol
    safe = np.where(ok, norm, 1.0)
    return np.where(ok[None], x / safe[None], 0.0)


def project_onto(x, ref, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Per-location projection of the channel vectors of ``x`` onto those of ``ref``."""
    x = as_latent(x, "x")
    ref = as_latent(ref, "ref")
    _same_shape(x, ref)
    r_hat = channel_normalize(ref, tol)
    coef = np.einsum("chw,chw->hw", x, r_hat)
    return coef[None] * r_hat


def cosine_similarity_map(a, b, tol: float = DEFAULT_TOL) -> np.ndarray:
    a = as_latent(a, "a")
    b = as_latent(b, "b")
    _same_shape(a, b)
    out = np.einsum("chw,chw->hw", channel_normalize(a, tol), channel_normalize(b, tol))
    return np.clip(out, -1.0, 1.0)


# --- persistence -----------------------------------------------------------

def save_latent(path, x) -> None:
    """Binary form: ``SFLT`` magic, little-endian u32 C, H, W, then float32 payload (row-major)."""
    x = as_latent(x)
    c, h, w = x.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, c, h, w))
        fh.write(x.astype("<f4").tobytes(order="C"))


def load_latent(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DimensionError(f"{path}: truncated latent header")
    magic, c, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DimensionError(f"{path}: bad magic {magic!r}")
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * c * h * w:
        raise DimensionError(f"{path}: payload holds {len(payload)} bytes, expected {4 * c * h * w}")
    data = np.frombuffer(payload, dtype="<f4").reshape(c, h, w)
    return data.astype(np.float64)


def save_latent_text(path, x) -> None:
    """Human-readable form: JSON nested arrays of the float32-rounded values."""
    x = as_latent(x).astype(np.float32)
    Path(path).write_text(json.dumps({"shape": list(x.shape), "data": x.tolist()}) + "\n")


def load_latent_text(path) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    data = np.asarray(doc["data"], dtype=np.float32)
    if list(data.shape) != list(doc["shape"]):
        raise DimensionError(f"{path}: declared shape {doc['shape']} does not match data {data.shape}")
    return as_latent(data.astype(np.float64))


def load_any(path) -> np.ndarray:
    """Load either latent format, sniffing the magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    return load_latent(path) if head == MAGIC else load_latent_text(path)
