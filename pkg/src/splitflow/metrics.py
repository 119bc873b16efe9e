"""Fidelity and edit-quality metrics for latents.

``energy_distance`` stands in for text-image alignment scores and
``background_displacement`` for perceptual background-preservation scores;
reports label them as proxies.
"""
from __future__ import annotations

import math
import warnings

import numpy as np
from scipy.signal import correlate2d
from scipy.spatial.distance import cdist

from .errors import ConfigError, DimensionError, DomainError
from .latent import as_latent

NOT_APPLICABLE = "n/a"


class EmptyBackgroundWarning(UserWarning):
    """The edit mask covers every location, so there is no background to measure."""


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    if peak <= 0:
        raise DomainError("peak must be positive")
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, window: int = 7, sigma: float = 1.5, peak: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over all valid window positions and channels."""
    a, b = _pair(as_latent(a, "a"), as_latent(b, "b"))
    if min(a.shape[1:]) < window:
        raise DimensionError(f"SSIM needs H, W >= {window}, got {a.shape[1:]}")
    win = gaussian_window(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    vals = []
    for x, y in zip(a, b):
        mx = correlate2d(x, win, mode="valid")
        my = correlate2d(y, win, mode="valid")
        sxx = correlate2d(x * x, win, mode="valid") - mx * mx
        syy = correlate2d(y * y, win, mode="valid") - my * my
        sxy = correlate2d(x * y, win, mode="valid") - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(num / den)
    return float(np.mean(vals))


def ssim_or_na(a, b, **kw):
    """SSIM, or :data:`NOT_APPLICABLE` when the spatial grid is smaller than the window."""
    window = kw.get("window", 7)
    if min(np.shape(a)[1:]) < window:
        return NOT_APPLICABLE
    return ssim(a, b, **kw)


def energy_distance(samples_a, samples_b) -> float:
    """V-statistic energy distance ``2 E|A-B| - E|A-A'| - E|B-B'|`` over all pairs."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ConfigError("energy distance needs two non-empty sample sets")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"sample dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    return float(2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


def background_displacement(x0_src, x_edited, edit_mask) -> float:
    """Mean ``|x_edited - x0_src|`` over all channels at locations where ``edit_mask == 0``."""
    x0, xe = _pair(as_latent(x0_src, "x0_src"), as_latent(x_edited, "x_edited"))
    mask = np.asarray(edit_mask, dtype=np.float64)
    if mask.shape != x0.shape[1:]:
        raise DimensionError(f"mask shape {mask.shape} does not match latent grid {x0.shape[1:]}")
    if not np.all((mask == 0) | (mask == 1)):
        raise DomainError("edit mask must be binary")
    keep = mask == 0
    if not keep.any():
        warnings.warn("edit mask leaves no background; reporting 0", EmptyBackgroundWarning, stacklevel=2)
        return 0.0
    return float(np.abs(xe - x0)[:, keep].mean())


def background_columns(x, edit_mask) -> np.ndarray:
    """The unmasked columns of ``x`` packed into a (C, 1, n_background) latent."""
    keep = np.asarray(edit_mask) == 0
    return np.asarray(x)[:, keep][:, None, :]
