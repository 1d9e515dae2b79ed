"""Hand-crafted motion-sensitive features, standing in for a learned 3D encoder."""

from __future__ import annotations

import csv
from typing import Sequence

import numpy as np
from scipy import ndimage

from ..dataset import read_labels
from ..kspace import fft3
from ..volume import Volume3D, read_volume

FEATURE_VERSION = "v1"
FEATURE_NAMES = (
    "hf_ratio_x", "hf_ratio_y", "hf_ratio_z",
    "grad_mean", "grad_std",
    "entropy",
    "tenengrad",
    "ghost_score",
    "background_ratio",
    "log_background_ratio",
)
N_FEATURES = len(FEATURE_NAMES)


def hf_energy_ratios(data: np.ndarray) -> np.ndarray:
    """Per axis, the share of non-DC spectral energy above a quarter of the Nyquist band.

    Depends only on ``|FFT|``, so circular shifts and flips leave it unchanged.
    """
    power = np.abs(fft3(data.astype(np.float64))) ** 2
    power.flat[0] = 0.0
    total = power.sum()
    out = np.zeros(3)
    if total <= 0:
        return out
    for ax, n in enumerate(data.shape):
        k = np.abs(np.fft.fftfreq(n))
        high = k > 0.25
        shape = [1, 1, 1]
        shape[ax] = n
        out[ax] = float((power * high.reshape(shape)).sum() / total)
    return out


def intensity_entropy(data: np.ndarray, bins: int = 64) -> float:
    hist, _ = np.histogram(data, bins=bins, range=(0.0, 1.0))
    p = hist[hist > 0] / hist.sum()
    return float(-(p * np.log(p)).sum())


def _object_mask(data: np.ndarray, frac: float = 0.2) -> np.ndarray:
    peak = float(data.max())
    if peak <= 0:
        return np.zeros(data.shape, dtype=bool)
    mask = data > frac * peak
    mask = ndimage.binary_closing(mask, iterations=2)
    return ndimage.binary_dilation(mask, iterations=2)


def ghost_score(data: np.ndarray, phase_axis: int = 1) -> float:
    """Ghost energy along the phase axis.

    Lag-1 autocorrelation along the phase axis of the signal left outside
    the (dilated) object mask, weighted by that signal's mean energy
    relative to the object. Replicated edges from motion put coherent
    structure there; clean backgrounds are near zero.
    """
    mask = _object_mask(data)
    if not mask.any() or mask.all():
        return 0.0
    bg = np.where(mask, 0.0, data.astype(np.float64))
    energy = float((bg ** 2).mean())
    fg = float((data[mask].astype(np.float64) ** 2).mean())
    if energy <= 0 or fg <= 0:
        return 0.0
    shifted = np.roll(bg, 1, axis=phase_axis)
    corr = float((bg * shifted).mean()) / energy
    return float(max(corr, 0.0) * np.sqrt(energy / fg))


def extract_features(v: Volume3D, phase_axis: int = 1) -> np.ndarray:
    """Fixed-length feature vector (see ``FEATURE_NAMES``) of a [0, 1]-normalized volume."""
    data = np.asarray(v.data, dtype=np.float64)
    feats = np.zeros(N_FEATURES)
    if float(data.max()) == float(data.min()):
        return feats
    feats[0:3] = hf_energy_ratios(data)
    grads = np.gradient(data)
    gmag = np.sqrt(sum(g * g for g in grads))
    feats[3] = gmag.mean()
    feats[4] = gmag.std()
    feats[5] = intensity_entropy(data)
    sob = [ndimage.sobel(data, axis=a, mode="constant") for a in range(3)]
    feats[6] = float(np.mean(sum(s * s for s in sob)))
    feats[7] = ghost_score(data, phase_axis)
    mask = _object_mask(data)
    bg = data[~mask]
    fg_mean = float(data[mask].mean()) if mask.any() else 0.0
    ratio = float(bg.mean()) / fg_mean if bg.size and fg_mean > 0 else 0.0
    feats[8] = ratio
    feats[9] = np.log(ratio + 1e-4)
    return feats


# --------------------------------------------------------------------------
# feature tables: path, split, target, then one column per feature
# --------------------------------------------------------------------------

def write_feature_table(path, rows: Sequence[dict], features: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "split", "target", *FEATURE_NAMES])
        for row, f in zip(rows, features):
            w.writerow([row["path"], row["split"], repr(float(row["target"])), *(repr(float(x)) for x in f)])


def read_feature_table(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """``{split: (features, targets)}`` from a feature CSV."""
    out: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"split", "target", *FEATURE_NAMES} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            xs, ys = out.setdefault(row["split"], ([], []))
            xs.append([float(row[n]) for n in FEATURE_NAMES])
            ys.append(float(row["target"]))
    return {k: (np.array(x), np.array(y)) for k, (x, y) in out.items()}


def tabulate_generated(labels_path, out_path, phase_axis: int = 1) -> int:
    """Feature table for every volume listed in a generated ``labels.csv``; returns the row count."""
    rows = [dict(r, target=r["rms_score"]) for r in read_labels(labels_path)]
    feats = np.array([extract_features(read_volume(r["path"]), phase_axis) for r in rows]).reshape(len(rows), N_FEATURES)
    write_feature_table(out_path, rows, feats)
    return len(rows)
