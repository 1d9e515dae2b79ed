"""Synthetic test objects: a Gaussian blob and a randomized head-like phantom."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volume import Volume3D

__all__ = ["gaussian_blob", "head_phantom"]


def _grid_mm(dims, spacing):
    axes = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def gaussian_blob(dims=(32, 32, 32), spacing=(1.0, 1.0, 1.0), sigma_mm=None, offset_mm=(0.0, 0.0, 0.0)) -> Volume3D:
    """Smooth isotropic Gaussian centered in the grid (peak 1)."""
    if sigma_mm is None:
        sigma_mm = min(n * s for n, s in zip(dims, spacing)) / 8.0
    x, y, z = _grid_mm(dims, spacing)
    r2 = (x - offset_mm[0]) ** 2 + (y - offset_mm[1]) ** 2 + (z - offset_mm[2]) ** 2
    return Volume3D(np.exp(-0.5 * r2 / sigma_mm ** 2).astype(np.float32), spacing)


def _ellipsoid(x, y, z, center, radii, edge):
    d = np.sqrt(((x - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2
                + ((z - center[2]) / radii[2]) ** 2)
    # soft edge of roughly ``edge`` mm
    scale = edge / min(radii)
    return 1.0 / (1.0 + np.exp((d - 1.0) / scale))


def head_phantom(dims=(64, 64, 64), spacing=(3.0, 3.0, 3.0), seed: int = 0) -> Volume3D:
    """Nested ellipsoids resembling a T1w head: scalp, skull gap, brain, ventricles, texture.

    Sizes are in mm and jittered per seed, so every seed gives a distinct "subject".
    """
    rng = np.random.default_rng(seed)
    x, y, z = _grid_mm(dims, spacing)
    fov = np.array([n * s for n, s in zip(dims, spacing)])
    jitter = lambda: 1.0 + rng.uniform(-0.08, 0.08, size=3)
    head_r = fov * np.array([0.36, 0.42, 0.38]) * jitter()
    shift = rng.uniform(-0.02, 0.02, size=3) * fov
    edge = 0.4 * min(spacing)

    img = 0.55 * _ellipsoid(x, y, z, shift, head_r, edge)
    img -= 0.45 * _ellipsoid(x, y, z, shift, head_r * 0.9, edge)
    brain_r = head_r * 0.84
    img += 0.65 * _ellipsoid(x, y, z, shift, brain_r, edge)
    # white matter core brighter than cortex
    img += 0.25 * _ellipsoid(x, y, z, shift, brain_r * 0.75 * jitter(), edge)
    vent_c = shift + rng.uniform(-0.03, 0.03, size=3) * fov
    for side in (-1.0, 1.0):
        c = vent_c + np.array([side * brain_r[0] * 0.15, 0.0, brain_r[2] * 0.05])
        img -= 0.6 * _ellipsoid(x, y, z, c, brain_r * np.array([0.08, 0.3, 0.12]) * jitter(), edge)
    for _ in range(6):
        c = shift + rng.uniform(-0.5, 0.5, size=3) * brain_r
        r = brain_r * rng.uniform(0.06, 0.15)
        img += rng.uniform(-0.15, 0.15) * _ellipsoid(x, y, z, c, np.full(3, r.mean()), edge)
    # fine texture inside the brain, so k-space carries energy at all frequencies
    noise = ndimage.gaussian_filter(rng.normal(size=tuple(dims)), sigma=0.8)
    noise /= noise.std() + 1e-12
    img *= 1.0 + 0.12 * noise * _ellipsoid(x, y, z, shift, brain_r, edge)
    img = np.clip(img, 0.0, None)
    return Volume3D(img.astype(np.float32), spacing)
