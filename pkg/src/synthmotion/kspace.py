"""Synthetic motion corruption through a composite k-space.

A motion trace splits the phase-encode axis of k-space into ``N + 1``
contiguous slabs. Slab 0 is acquired from the unmoved volume, slab ``i``
from the volume moved by ``transforms[i - 1]``. Slab indices refer to the
unshifted FFT layout, so slab 0 always contains the DC line and the
unmoved pose dominates the image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.fft

from .volume import RigidTransform, Volume3D, resample_affine, world_center

__all__ = [
    "MotionParams",
    "MotionTrace",
    "sample_motion_trace",
    "corrupt_with_motion",
    "fft3",
    "ifft3",
    "segment_slices",
]


@dataclass(frozen=True)
class MotionParams:
    rotation_range: float = 2.0
    translation_range: float = 2.0
    n_transforms_range: tuple[int, int] = (1, 8)
    phase_axis: int | str = 1  # an axis index, or "random"
    # per-trace multiplier on both ranges; (1, 1) draws nothing extra
    severity_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.rotation_range < 0 or self.translation_range < 0:
            raise ValueError("motion ranges must be nonnegative")
        lo, hi = self.n_transforms_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad n_transforms_range {self.n_transforms_range}")
        if self.phase_axis != "random" and self.phase_axis not in (0, 1, 2):
            raise ValueError(f"phase_axis must be 0, 1, 2 or 'random', got {self.phase_axis!r}")
        if not 0 <= self.severity_range[0] <= self.severity_range[1]:
            raise ValueError(f"bad severity_range {self.severity_range}")


@dataclass(frozen=True)
class MotionTrace:
    transforms: tuple[RigidTransform, ...]
    boundaries: tuple[int, ...]
    phase_axis: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        n = len(self.transforms)
        if n < 1:
            raise ValueError("a motion trace needs at least one transform")
        b = self.boundaries
        if len(b) != n + 1:
            raise ValueError(f"need {n + 1} boundaries for {n} transforms, got {len(b)}")
        if b[0] <= 0 or any(b1 <= b0 for b0, b1 in zip(b, b[1:])):
            raise ValueError(f"boundaries must be strictly increasing and start > 0: {b}")
        if self.phase_axis not in (0, 1, 2):
            raise ValueError(f"phase_axis must be 0, 1 or 2, got {self.phase_axis}")

    @property
    def n_transforms(self) -> int:
        return len(self.transforms)

    @property
    def extent(self) -> int:
        return self.boundaries[-1]

    def to_dict(self) -> dict:
        return {
            "seed": int(self.rng_seed),
            "phase_axis": int(self.phase_axis),
            "boundaries": [int(x) for x in self.boundaries],
            "transforms": [
                {"rot_deg": [float(a) for a in t.rotation_deg],
                 "trans_mm": [float(a) for a in t.translation_mm]}
                for t in self.transforms
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MotionTrace":
        transforms = tuple(
            RigidTransform(tuple(t["rot_deg"]), tuple(t["trans_mm"])) for t in d["transforms"]
        )
        return cls(transforms, tuple(d["boundaries"]), d["phase_axis"], d["seed"])


def sample_motion_trace(params: MotionParams, extent: int | Sequence[int], seed: int) -> MotionTrace:
    """Draw a reproducible motion trace.

    ``extent`` is the phase-axis length, or the full volume dims when the
    phase axis is chosen at random.
    """
    rng = np.random.default_rng(seed)
    lo, hi = params.n_transforms_range
    n = int(rng.integers(lo, hi + 1))
    if params.phase_axis == "random":
        axis = int(rng.integers(0, 3))
        if np.ndim(extent) == 0:
            raise ValueError("random phase axis needs the full volume dims as extent")
        length = int(extent[axis])
    else:
        axis = int(params.phase_axis)
        length = int(extent[axis]) if np.ndim(extent) else int(extent)
    if length < n + 1:
        raise ValueError(f"phase extent {length} too small for {n} transforms")
    sev_lo, sev_hi = params.severity_range
    sev = float(rng.uniform(sev_lo, sev_hi)) if sev_hi > sev_lo else sev_lo
    rot_r, trans_r = params.rotation_range * sev, params.translation_range * sev
    rots = rng.uniform(-rot_r, rot_r, size=(n, 3))
    trans = rng.uniform(-trans_r, trans_r, size=(n, 3))
    cuts = np.sort(rng.choice(np.arange(1, length), size=n, replace=False))
    transforms = tuple(
        RigidTransform(tuple(float(a) for a in r), tuple(float(a) for a in t))
        for r, t in zip(rots, trans)
    )
    return MotionTrace(transforms, tuple(int(c) for c in cuts) + (length,), axis, int(seed))


def fft3(data: np.ndarray) -> np.ndarray:
    """Unnormalized forward 3D DFT. Single precision in, single precision out."""
    return scipy.fft.fftn(data, axes=(0, 1, 2), workers=1)


def ifft3(data: np.ndarray) -> np.ndarray:
    """Inverse 3D DFT scaled by ``1 / (nx * ny * nz)``."""
    return scipy.fft.ifftn(data, axes=(0, 1, 2), workers=1)


def segment_slices(trace: MotionTrace) -> list[np.ndarray]:
    """Unshifted frequency indices owned by each of the ``N + 1`` segments."""
    starts = (0,) + trace.boundaries[:-1]
    return [np.arange(a, b) for a, b in zip(starts, trace.boundaries)]


def corrupt_with_motion(v: Volume3D, trace: MotionTrace) -> Volume3D:
    """Assemble a composite k-space from moved copies of ``v``; return its magnitude image."""
    if not np.isfinite(v.data).all():
        raise ValueError("input volume is not finite")
    axis = trace.phase_axis
    if v.dims[axis] != trace.extent:
        raise ValueError(f"trace extent {trace.extent} != volume extent {v.dims[axis]} on axis {axis}")
    if all(t.is_identity for t in trace.transforms):
        return v.with_data(np.abs(ifft3(fft3(v.data))).astype(np.float32))

    center = world_center(v)
    segments = segment_slices(trace)
    composite = fft3(v.data)
    index = [slice(None)] * 3
    # segment 0 already sits in the composite
    for t, idx in zip(trace.transforms, segments[1:]):
        moved = resample_affine(v, t.matrix(center=center)) if not t.is_identity else v
        spectrum = fft3(moved.data)
        index[axis] = slice(int(idx[0]), int(idx[-1]) + 1)
        sel = tuple(index)
        composite[sel] = spectrum[sel]
    return v.with_data(np.abs(ifft3(composite)).astype(np.float32))
