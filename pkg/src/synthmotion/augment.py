"""Random non-motion transforms and the full generation pipeline.

Stage order is fixed: normalize, elastic, scale, flip, bias field, gamma
contrast, crop, motion, clamp. Every stage draws from its own child RNG
stream, so toggling one stage leaves the others' draws unchanged.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from itertools import product
from typing import Optional

import numpy as np
from scipy import ndimage

from .kspace import MotionParams, MotionTrace, corrupt_with_motion, sample_motion_trace
from .volume import (
    RigidTransform,
    Volume3D,
    crop_roi,
    normalize_intensity,
    resample_affine,
    world_center,
)

__all__ = [
    "AugmentConfig",
    "AugmentRecord",
    "elastic_field",
    "elastic_deform",
    "bias_field",
    "bias_exponents",
    "gamma_contrast",
    "sagittal_flip",
    "scale_volume",
    "stage_seeds",
    "apply_pipeline",
    "replay_pipeline",
]

_STAGES = ("elastic", "scale", "flip", "bias", "contrast", "motion")


@dataclass(frozen=True)
class AugmentConfig:
    roi: tuple[int, int, int] = (160, 192, 160)
    norm_percentiles: tuple[float, float] = (1.0, 99.0)
    elastic_grid: tuple[int, int, int] = (7, 7, 7)
    elastic_max_disp: float = 8.0
    bias_order: int = 3
    bias_coeff_range: float = 0.3
    log_gamma_range: float = 0.3
    flip_probability: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    elastic: bool = True
    scale: bool = True
    flip: bool = True
    bias: bool = True
    contrast: bool = True
    motion: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.elastic_grid) < 2:
            raise ValueError("elastic grid needs at least 2 control points per axis")
        if self.elastic_max_disp < 0 or self.bias_coeff_range < 0 or self.log_gamma_range < 0:
            raise ValueError("augmentation ranges must be nonnegative")
        if self.bias_order < 0:
            raise ValueError("bias_order must be >= 0")
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")

    def disabled(self) -> "AugmentConfig":
        """Copy with every random stage switched off."""
        return AugmentConfig(**{**asdict(self), **{s: False for s in _STAGES}})


@dataclass
class AugmentRecord:
    """Every value sampled by one pipeline pass; enough to replay it."""

    elastic_ctrl: Optional[list] = None
    scale: Optional[float] = None
    flip: bool = False
    bias_coeffs: Optional[list] = None
    log_gamma: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentRecord":
        return cls(**d)


def stage_seeds(seed: int) -> dict[str, np.random.SeedSequence]:
    children = np.random.SeedSequence(seed).spawn(len(_STAGES))
    return dict(zip(_STAGES, children))


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0])


# --------------------------------------------------------------------------
# elastic
# --------------------------------------------------------------------------

def _linear_upsample_matrix(n: int, g: int) -> np.ndarray:
    """(n, g) weights mapping g control values onto n samples, end-aligned."""
    pos = np.linspace(0.0, g - 1.0, n) if n > 1 else np.zeros(1)
    lo = np.clip(np.floor(pos).astype(int), 0, g - 2)
    frac = pos - lo
    w = np.zeros((n, g))
    w[np.arange(n), lo] = 1.0 - frac
    w[np.arange(n), lo + 1] += frac
    return w


def sample_elastic_ctrl(rng: np.random.Generator, grid, max_disp: float) -> np.ndarray:
    """Control displacements (mm) drawn uniformly from the ball of radius ``max_disp``."""
    shape = tuple(grid) + (3,)
    direction = rng.normal(size=shape)
    direction /= np.maximum(np.linalg.norm(direction, axis=-1, keepdims=True), 1e-300)
    radius = max_disp * rng.uniform(size=tuple(grid) + (1,)) ** (1.0 / 3.0)
    return direction * radius


def elastic_field(dims, ctrl: np.ndarray) -> np.ndarray:
    """Dense (nx, ny, nz, 3) displacement field (mm), trilinear in the control grid."""
    ctrl = np.asarray(ctrl, dtype=np.float64)
    gx, gy, gz = ctrl.shape[:3]
    wx, wy, wz = (_linear_upsample_matrix(n, g) for n, g in zip(dims, (gx, gy, gz)))
    f = np.tensordot(wx, ctrl, axes=(1, 0))
    f = np.tensordot(wy, f, axes=(1, 1)).transpose(1, 0, 2, 3)
    f = np.tensordot(wz, f, axes=(1, 2)).transpose(1, 2, 0, 3)
    return f


def _apply_elastic(v: Volume3D, ctrl: np.ndarray) -> Volume3D:
    if not np.any(ctrl):
        return v
    disp = elastic_field(v.dims, ctrl)
    coords = np.indices(v.dims, dtype=np.float64)
    for ax in range(3):
        coords[ax] += disp[..., ax] / v.spacing[ax]
    out = ndimage.map_coordinates(v.data, coords, order=1, mode="constant", cval=0.0,
                                  prefilter=False, output=np.float32)
    return v.with_data(out)


def elastic_deform(v: Volume3D, grid=(7, 7, 7), max_disp: float = 8.0, seed: int = 0) -> Volume3D:
    """Warp ``v`` by a random smooth displacement field bounded by ``max_disp`` mm."""
    if min(grid) < 2:
        raise ValueError("elastic grid needs at least 2 control points per axis")
    ctrl = sample_elastic_ctrl(np.random.default_rng(seed), grid, max_disp)
    return _apply_elastic(v, ctrl)


# --------------------------------------------------------------------------
# bias field
# --------------------------------------------------------------------------

def bias_exponents(order: int) -> list[tuple[int, int, int]]:
    """Monomial exponents (a, b, c) with a + b + c <= order, in a fixed order."""
    return [e for e in product(range(order + 1), repeat=3) if sum(e) <= order]


def bias_polynomial(dims, order: int, coeffs) -> np.ndarray:
    """Polynomial log-field over coordinates normalized to [-1, 1]^3."""
    xs, ys, zs = (np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in dims)
    terms = dict(zip(bias_exponents(order), coeffs))
    # nest the sums so only ``order + 1`` full-size passes are needed
    poly = np.zeros(tuple(dims))
    for a in range(order + 1):
        plane = np.zeros((len(ys), len(zs)))
        for b in range(order + 1 - a):
            line = np.zeros(len(zs))
            for c in range(order + 1 - a - b):
                line += terms[(a, b, c)] * zs ** c
            plane += np.outer(ys ** b, line)
        poly += (xs ** a)[:, None, None] * plane[None, :, :]
    return poly


def _apply_bias(v: Volume3D, order: int, coeffs) -> Volume3D:
    if not np.any(coeffs):
        return v
    field_ = np.exp(bias_polynomial(v.dims, order, coeffs))
    return v.with_data((v.data * field_).astype(np.float32))


def bias_field(v: Volume3D, order: int = 3, coeff_range: float = 0.3, seed: int = 0) -> Volume3D:
    """Multiply by ``exp(P)`` for a random polynomial ``P`` of total degree <= order."""
    if order < 0:
        raise ValueError("order must be >= 0")
    rng = np.random.default_rng(seed)
    coeffs = rng.uniform(-coeff_range, coeff_range, size=len(bias_exponents(order)))
    return _apply_bias(v, order, coeffs)


# --------------------------------------------------------------------------
# intensity / geometry
# --------------------------------------------------------------------------

def _apply_gamma(v: Volume3D, log_gamma: float) -> Volume3D:
    if v.data.min() < 0 or v.data.max() > 1:
        raise ValueError("gamma contrast expects values in [0, 1]")
    if log_gamma == 0:
        return v
    return v.with_data(np.power(v.data, np.float32(math.exp(log_gamma))))


def gamma_contrast(v: Volume3D, log_gamma_range: float = 0.3, seed: int = 0) -> Volume3D:
    """``v ** exp(u)`` with ``u`` uniform in ``+-log_gamma_range``."""
    u = float(np.random.default_rng(seed).uniform(-log_gamma_range, log_gamma_range))
    return _apply_gamma(v, u)


def sagittal_flip(v: Volume3D) -> Volume3D:
    """Reverse the x (left-right) axis."""
    return v.with_data(np.ascontiguousarray(v.data[::-1]))


def scale_volume(v: Volume3D, factor: float) -> Volume3D:
    """Isotropic zoom by ``factor`` about the volume center."""
    if factor == 1.0:
        return v
    c = world_center(v)
    m = np.eye(4)
    m[:3, :3] *= factor
    m[:3, 3] = c - factor * c
    return resample_affine(v, m)


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

def _sample_record(cfg: AugmentConfig, seeds) -> AugmentRecord:
    rec = AugmentRecord()
    if cfg.elastic and cfg.elastic_max_disp > 0:
        rng = np.random.default_rng(seeds["elastic"])
        rec.elastic_ctrl = sample_elastic_ctrl(rng, cfg.elastic_grid, cfg.elastic_max_disp).tolist()
    if cfg.scale:
        rec.scale = float(np.random.default_rng(seeds["scale"]).uniform(*cfg.scale_range))
    if cfg.flip:
        rec.flip = bool(np.random.default_rng(seeds["flip"]).uniform() < cfg.flip_probability)
    if cfg.bias:
        rng = np.random.default_rng(seeds["bias"])
        n = len(bias_exponents(cfg.bias_order))
        rec.bias_coeffs = rng.uniform(-cfg.bias_coeff_range, cfg.bias_coeff_range, size=n).tolist()
    if cfg.contrast:
        rec.log_gamma = float(np.random.default_rng(seeds["contrast"]).uniform(-cfg.log_gamma_range, cfg.log_gamma_range))
    return rec


def _identity_trace(extent: int, axis: int, seed: int) -> MotionTrace:
    return MotionTrace((RigidTransform(),), (1, extent), axis, seed)


def _run_stages(v: Volume3D, cfg: AugmentConfig, rec: AugmentRecord, trace: MotionTrace | None) -> Volume3D:
    out = normalize_intensity(v, *cfg.norm_percentiles)
    if rec.elastic_ctrl is not None:
        out = _apply_elastic(out, np.asarray(rec.elastic_ctrl))
    if rec.scale is not None:
        out = scale_volume(out, rec.scale)
    if rec.flip:
        out = sagittal_flip(out)
    if rec.bias_coeffs is not None:
        out = _apply_bias(out, cfg.bias_order, rec.bias_coeffs)
        peak = float(out.data.max())
        if peak > 1.0:
            # keep the gamma stage's [0, 1] precondition
            out = out.with_data(out.data / np.float32(peak))
    if rec.log_gamma is not None:
        out = _apply_gamma(out, rec.log_gamma)
    out = crop_roi(out, cfg.roi)
    if trace is not None:
        out = corrupt_with_motion(out, trace)
    return out.with_data(np.clip(out.data, 0.0, 1.0))


def apply_pipeline(
    v: Volume3D,
    cfg: AugmentConfig,
    motion: MotionParams,
    seed: int,
) -> tuple[Volume3D, MotionTrace, AugmentRecord]:
    """One random forward pass: returns the corrupted volume, its motion trace and the record."""
    seeds = stage_seeds(seed)
    rec = _sample_record(cfg, seeds)
    trace = preview_trace(cfg, motion, seed) if cfg.motion else None
    out = _run_stages(v, cfg, rec, trace)
    if trace is None:
        axis = motion.phase_axis if motion.phase_axis != "random" else 1
        trace = _identity_trace(cfg.roi[axis], axis, _seed_int(seeds["motion"]))
    return out, trace, rec


def preview_trace(cfg: AugmentConfig, motion: MotionParams, seed: int) -> MotionTrace:
    """The motion trace ``apply_pipeline`` would draw for ``seed``, without running it."""
    return sample_motion_trace(motion, cfg.roi, _seed_int(stage_seeds(seed)["motion"]))


def replay_pipeline(v: Volume3D, cfg: AugmentConfig, rec: AugmentRecord, trace: MotionTrace) -> Volume3D:
    """Re-run a pass from recorded parameters instead of a seed."""
    use_trace = trace if cfg.motion else None
    return _run_stages(v, cfg, rec, use_trace)
