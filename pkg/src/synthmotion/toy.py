"""Desk-scale fixture: phantom "subjects" across sites, a pretraining set and an imbalanced QC set.

Everything is derived from one seed, so the fixture is reproducible without
shipping any image data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import AugmentConfig, apply_pipeline, preview_trace
from .config import RunConfig, RunSettings, save_config
from .dataset import (
    ManifestEntry,
    derive_seed,
    filter_for_synthesis,
    run_generation,
    split_by_site,
    split_subjects,
    write_manifest,
)
from .kspace import MotionParams
from .labels import RmsConfig, trace_score
from .phantom import head_phantom
from .probe.features import extract_features, read_feature_table, tabulate_generated, write_feature_table
from .probe.train import TOY_PRETRAIN, TOY_SCRATCH, TOY_TRANSFER, QcData
from .volume import read_volume, write_volume

log = logging.getLogger(__name__)

TOY_SOURCE_DIMS = (72, 80, 72)
TOY_SPACING = (1.5, 1.5, 1.5)
TOY_AUGMENT = AugmentConfig(roi=(64, 64, 64))
TOY_MOTION = MotionParams(rotation_range=3.0, translation_range=3.0, n_transforms_range=(1, 8),
                          phase_axis=1, severity_range=(0.0, 1.0))
# class 0 = merged poor/fair, 1 = good, 2 = excellent; bounds on the motion score (mm)
QC_CLASS_BOUNDS = ((2.2, np.inf), (1.0, 2.2), (0.0, 1.0))
QC_COUNTS = {"train": (7, 38, 70), "val": (1, 12, 26), "test": (9, 90, 125)}


def make_sources(out_dir, n_subjects: int = 60, n_sites: int = 8, qc_sites: int = 2, seed: int = 0) -> list[ManifestEntry]:
    """Write phantom source volumes and return their manifest.

    A few subjects get QC score 3 or a motion remark, so the synthesis filter
    has something to drop.
    """
    out_dir = Path(out_dir)
    (out_dir / "sources").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_subjects):
        subj = f"sub-{i:03d}"
        site = f"site-{i % n_sites:02d}"
        rel = f"sources/{subj}_T1w.nii.gz"
        path = out_dir / rel
        if not path.exists():
            write_volume(head_phantom(TOY_SOURCE_DIMS, TOY_SPACING, seed=seed * 100003 + i), path)
        roll = rng.uniform()
        score, comment = 4, ""
        if roll < 0.05:
            score, comment = 3, "mild blurring"
        elif roll < 0.1:
            comment = "slight motion visible"
        entries.append(ManifestEntry(subj, site, rel, score, comment or None))
    sites = sorted({e.site_id for e in entries})
    entries = split_by_site(entries, sites[qc_sites:], sites[:qc_sites])
    write_manifest(entries, out_dir / "manifest.csv")
    return entries


@dataclass
class ToySet:
    root: Path
    manifest: list[ManifestEntry]
    pretrain_features: Path
    qc_features: Path
    report: dict


def build_pretrain_set(root, entries: Sequence[ManifestEntry], passes: int = 10, seed: int = 0,
                       workers: int = 1, cfg: AugmentConfig = TOY_AUGMENT, motion: MotionParams = TOY_MOTION):
    """Generate the synthetic-motion set from the synthesis pool and tabulate its features."""
    root = Path(root)
    synth = [e for e in filter_for_synthesis(entries) if e.pool == "synthetic"]
    synth = split_subjects(synth, (0.7, 0.15, 0.15), seed=seed)
    write_manifest(synth, root / "synthesis_manifest.csv")
    report = run_generation([e for e in synth if e.split in ("train", "val")], root / "generated", cfg, motion,
                            passes=passes, master_seed=seed, workers=workers, base=root)
    tabulate_generated(root / "generated" / "labels.csv", root / "pretrain_features.csv",
                       motion.phase_axis if motion.phase_axis != "random" else 1)
    return report


def qc_class_of(score: float) -> int:
    for cls, (lo, hi) in enumerate(QC_CLASS_BOUNDS):
        if lo <= score < hi:
            return cls
    raise ValueError(f"score {score} outside every QC class")


def build_qc_set(root, entries: Sequence[ManifestEntry], counts=QC_COUNTS, seed: int = 0,
                 cfg: AugmentConfig = TOY_AUGMENT, motion: MotionParams = TOY_MOTION) -> None:
    """Imbalanced 3-class QC set from the QC-pool sites.

    Volumes go through the same generator; each class is filled by scanning
    pipeline seeds until the drawn motion score falls in the class interval.
    """
    root = Path(root)
    qc = [e for e in entries if e.pool == "qc"]
    qc = split_subjects(qc, (0.34, 0.16, 0.5), seed=seed + 1)
    by_split = {s: [e for e in qc if e.split == s] for s in counts}
    sources = {}
    rows, feats = [], []
    rms = RmsConfig()
    axis = motion.phase_axis if motion.phase_axis != "random" else 1
    for split, per_class in counts.items():
        subjects = by_split[split]
        if not subjects:
            raise ValueError(f"no QC subjects landed in split {split!r}")
        for cls, n in enumerate(per_class):
            k = 0
            attempt = 0
            while k < n:
                e = subjects[(k + cls) % len(subjects)]
                s = derive_seed(seed, f"qc/{split}/{cls}/{e.volume_id}", attempt)
                attempt += 1
                score = trace_score(preview_trace(cfg, motion, s), rms)
                if qc_class_of(score) != cls:
                    continue
                if e.path not in sources:
                    sources[e.path] = read_volume(root / e.path)
                out, trace, _ = apply_pipeline(sources[e.path], cfg, motion, s)
                rows.append({"path": f"{e.volume_id}#{s}", "split": split, "target": cls})
                feats.append(extract_features(out, axis))
                k += 1
    write_feature_table(root / "qc_features.csv", rows, np.array(feats))


def toy_config(root=None) -> RunConfig:
    """Run config matching the toy fixture, including the desk-scale training presets."""
    run = RunSettings(manifest=None if root is None else str(Path(root) / "synthesis_manifest.csv"),
                      out_dir=None if root is None else str(Path(root) / "generated"), passes=10)
    return RunConfig(run=run, augment=TOY_AUGMENT, motion=TOY_MOTION, pretrain=TOY_PRETRAIN,
                     transfer=TOY_TRANSFER, scratch=TOY_SCRATCH)


def build_toy_set(root, n_subjects: int = 60, passes: int = 10, seed: int = 0, workers: int = 1) -> ToySet:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = make_sources(root, n_subjects=n_subjects, seed=seed)
    report = build_pretrain_set(root, entries, passes=passes, seed=seed, workers=workers)
    build_qc_set(root, entries, seed=seed)
    save_config(toy_config(root), root / "config.toml")
    return ToySet(root, entries, root / "pretrain_features.csv", root / "qc_features.csv", report)


def load_qc_data(path) -> QcData:
    t = read_feature_table(path)
    return QcData(t["train"][0], t["train"][1].astype(int), t["val"][0], t["val"][1].astype(int),
                  t["test"][0], t["test"][1].astype(int))
