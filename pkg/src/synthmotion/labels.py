"""Motion-score ground truth and the binned soft-label codec."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .kspace import MotionTrace
from .volume import RigidTransform

__all__ = [
    "RmsConfig",
    "BinSpec",
    "rms_deviation",
    "trace_score",
    "encode_soft",
    "decode_expected",
    "kl_divergence",
]


@dataclass(frozen=True)
class RmsConfig:
    sphere_radius: float = 80.0
    center: tuple[float, float, float] | None = None  # None: the rotation center
    aggregation: str = "mean"

    def __post_init__(self):
        if self.sphere_radius <= 0:
            raise ValueError("sphere_radius must be positive")
        if self.aggregation not in ("mean", "max"):
            raise ValueError(f"aggregation must be 'mean' or 'max', got {self.aggregation!r}")


@dataclass(frozen=True)
class BinSpec:
    n_bins: int = 50
    lo: float = -0.8
    hi: float = 4.8
    soft_sigma: float | None = None  # None: one bin width

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("BinSpec needs lo < hi")
        if self.n_bins < 2:
            raise ValueError("BinSpec needs at least 2 bins")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n_bins

    @property
    def sigma(self) -> float:
        return self.width if self.soft_sigma is None else float(self.soft_sigma)

    @property
    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.n_bins) + 0.5) * self.width

    @property
    def edges(self) -> np.ndarray:
        return self.lo + np.arange(self.n_bins + 1) * self.width

    def bin_index(self, x: Union[float, np.ndarray]) -> np.ndarray:
        """Bin of each score; out-of-range scores fall into the edge bins."""
        idx = np.floor((np.asarray(x, dtype=np.float64) - self.lo) / self.width).astype(int)
        return np.clip(idx, 0, self.n_bins - 1)


def rms_deviation(t: Union[RigidTransform, np.ndarray], cfg: RmsConfig = RmsConfig()) -> float:
    """RMS displacement (mm) a transform induces over a sphere of radius R.

    With ``M - I = [A | t]`` expressed about the sphere center, the mean
    squared displacement of points uniform in the ball is
    ``R^2 / 5 * tr(A^T A) + t^T t``.
    """
    if isinstance(t, RigidTransform):
        m = t.matrix()
        rot_center = np.zeros(3) if t.center is None else np.asarray(t.center, dtype=np.float64)
    else:
        m = np.asarray(t, dtype=np.float64)
        rot_center = np.zeros(3)
    c = rot_center if cfg.center is None else np.asarray(cfg.center, dtype=np.float64)
    a = m[:3, :3] - np.eye(3)
    # translation seen from the sphere center
    tvec = m[:3, :3] @ c + m[:3, 3] - c
    r2 = cfg.sphere_radius ** 2
    return float(np.sqrt(r2 / 5.0 * np.trace(a.T @ a) + tvec @ tvec))


def trace_score(trace: MotionTrace, cfg: RmsConfig = RmsConfig()) -> float:
    """Scalar motion score of a trace: mean (or max) per-transform RMS deviation."""
    scores = [rms_deviation(t, cfg) for t in trace.transforms]
    return float(max(scores) if cfg.aggregation == "max" else np.mean(scores))


def encode_soft(x: Union[float, Sequence[float], np.ndarray], bins: BinSpec = BinSpec()) -> np.ndarray:
    """Gaussian soft label(s) over the bin centers.

    Accepts a scalar (returns shape ``(n_bins,)``) or an array of scores
    (returns ``(n, n_bins)``). Computed in log space so far out-of-range
    scores collapse onto the nearest edge bin instead of underflowing.
    """
    xs = np.asarray(x, dtype=np.float64)
    if not np.isfinite(xs).all():
        raise ValueError("scores must be finite")
    logits = -0.5 * ((bins.centers[None, :] - xs.reshape(-1, 1)) / bins.sigma) ** 2
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if xs.ndim == 0 else p


def decode_expected(p: np.ndarray, bins: BinSpec = BinSpec()) -> Union[float, np.ndarray]:
    """Expected score under bin probabilities: ``sum_i p_i * c_i``."""
    p = np.asarray(p, dtype=np.float64)
    out = p @ bins.centers
    return float(out) if p.ndim == 1 else out


def kl_divergence(target: np.ndarray, predicted: np.ndarray, epsilon: float = 1e-12) -> Union[float, np.ndarray]:
    """KL(target || predicted), row-wise for 2D input. Zero-target terms contribute 0."""
    p = np.asarray(target, dtype=np.float64)
    q = np.maximum(np.asarray(predicted, dtype=np.float64), epsilon)
    pos = p > 0
    terms = np.zeros(np.broadcast(p, q).shape)
    terms[pos] = p[pos] * (np.log(p[pos]) - np.log(np.broadcast_to(q, terms.shape)[pos]))
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out
