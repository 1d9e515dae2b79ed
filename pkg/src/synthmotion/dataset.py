"""Manifests, leakage-free splits, source filtering and batch generation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import re
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .augment import AugmentConfig, apply_pipeline
from .kspace import MotionParams
from .labels import BinSpec, RmsConfig, trace_score
from .volume import read_volume, write_volume

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ["subject_id", "site_id", "path", "qc_score", "qc_comment", "split", "pool"]
LABEL_FIELDS = ["path", "sidecar", "rms_score", "split"]
SPLITS = ("train", "val", "test", "unassigned")
POOLS = ("synthetic", "qc", "unassigned")
DEFAULT_MOTION_KEYWORDS = ("motion", "movement", "ringing")


class AuditError(ValueError):
    """A manifest violates the subject or site isolation rules."""


class GenerationError(RuntimeError):
    """Too many generation jobs failed."""


@dataclass
class ManifestEntry:
    subject_id: str
    site_id: str
    path: str
    qc_score: Optional[int] = None
    qc_comment: Optional[str] = None
    split: str = "unassigned"
    pool: str = "unassigned"

    def __post_init__(self):
        if not self.subject_id or not self.site_id:
            raise ValueError("subject_id and site_id must be nonempty")
        if self.qc_score is not None and self.qc_score not in (1, 2, 3, 4):
            raise ValueError(f"qc_score must be 1-4, got {self.qc_score}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.pool not in POOLS:
            raise ValueError(f"unknown pool {self.pool!r}")

    @property
    def volume_id(self) -> str:
        return f"{self.subject_id}/{Path(self.path).name}"


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "site_id", "path"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        for row in reader:
            score = (row.get("qc_score") or "").strip()
            entries.append(ManifestEntry(
                subject_id=row["subject_id"].strip(),
                site_id=row["site_id"].strip(),
                path=row["path"],
                qc_score=int(score) if score else None,
                qc_comment=row.get("qc_comment") or None,
                split=(row.get("split") or "unassigned").strip(),
                pool=(row.get("pool") or "unassigned").strip(),
            ))
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, quoting=csv.QUOTE_MINIMAL)
        writer.writeheader()
        for e in entries:
            row = asdict(e)
            row["qc_score"] = "" if e.qc_score is None else e.qc_score
            row["qc_comment"] = e.qc_comment or ""
            writer.writerow(row)


def resolve_path(entry: ManifestEntry, base: Path | None) -> Path:
    p = Path(entry.path)
    return p if p.is_absolute() or base is None else base / p


# --------------------------------------------------------------------------
# filtering and splitting
# --------------------------------------------------------------------------

def filter_for_synthesis(
    entries: Sequence[ManifestEntry],
    keywords: Sequence[str] = DEFAULT_MOTION_KEYWORDS,
) -> list[ManifestEntry]:
    """Keep excellent-quality scans (score 4) whose QC comment never mentions motion."""
    pattern = re.compile("|".join(re.escape(k) for k in keywords), re.IGNORECASE) if keywords else None
    kept = []
    for e in entries:
        if e.qc_score != 4:
            continue
        if pattern and e.qc_comment and pattern.search(e.qc_comment):
            log.info("synthesis filter dropped %s: comment %r", e.volume_id, e.qc_comment)
            continue
        kept.append(e)
    return kept


def split_by_site(entries: Sequence[ManifestEntry], synth_sites, qc_sites) -> list[ManifestEntry]:
    synth_sites, qc_sites = set(synth_sites), set(qc_sites)
    overlap = synth_sites & qc_sites
    if overlap:
        raise ValueError(f"sites assigned to both pools: {sorted(overlap)}")
    out = []
    for e in entries:
        pool = "synthetic" if e.site_id in synth_sites else "qc" if e.site_id in qc_sites else "unassigned"
        out.append(replace(e, pool=pool))
    return out


def split_subjects(
    entries: Sequence[ManifestEntry],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> list[ManifestEntry]:
    """Assign train/val/test per subject, so no subject straddles two splits."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr <= 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be 3 positive values summing to 1, got {fractions}")
    subjects = sorted({e.subject_id for e in entries})
    order = np.random.default_rng(seed).permutation(len(subjects))
    n = len(subjects)
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    n_train = min(max(n_train, 1 if n else 0), n)
    n_val = min(n_val, n - n_train)
    assignment = {}
    for rank, idx in enumerate(order):
        assignment[subjects[idx]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return [replace(e, split=assignment[e.subject_id]) for e in entries]


def audit_manifest(entries: Sequence[ManifestEntry]) -> None:
    """Raise ``AuditError`` if a subject spans splits or a site spans pools."""
    problems = []
    subj_splits: dict[str, set] = {}
    site_pools: dict[str, set] = {}
    for e in entries:
        if e.split != "unassigned":
            subj_splits.setdefault(e.subject_id, set()).add(e.split)
        if e.pool != "unassigned":
            site_pools.setdefault(e.site_id, set()).add(e.pool)
    for subj, splits in sorted(subj_splits.items()):
        if len(splits) > 1:
            problems.append(f"subject {subj} appears in splits {sorted(splits)}")
    for site, pools in sorted(site_pools.items()):
        if len(pools) > 1:
            problems.append(f"site {site} appears in pools {sorted(pools)}")
    if problems:
        raise AuditError("; ".join(problems))


def merge_qc_classes(entries: Iterable[ManifestEntry]) -> list[tuple[ManifestEntry, int]]:
    """Map QC scores onto 3 classes: {1, 2} -> 0, 3 -> 1, 4 -> 2. Unscored entries are skipped."""
    out = []
    for e in entries:
        if e.qc_score is None:
            log.warning("no qc_score for %s, skipped", e.volume_id)
            continue
        out.append((e, merge_score(e.qc_score)))
    return out


def merge_score(score: int) -> int:
    return {1: 0, 2: 0, 3: 1, 4: 2}[int(score)]


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def derive_seed(master_seed: int, volume_id: str, pass_index: int) -> int:
    """64-bit job seed from (master seed, volume id, pass); independent of scheduling."""
    digest = hashlib.blake2b(volume_id.encode("utf-8"), digest_size=8).digest()
    vid = int.from_bytes(digest, "little")
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, vid, int(pass_index)])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class GenerationJob:
    index: int
    source: str
    volume_id: str
    split: str
    pass_index: int
    seed: int
    volume_path: str
    sidecar_path: str


def _safe(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", s)


def plan_jobs(entries: Sequence[ManifestEntry], passes: int, master_seed: int, out_dir: Path,
              base: Path | None = None) -> list[GenerationJob]:
    jobs = []
    seen = set()
    for e in entries:
        if e.volume_id in seen:
            raise ValueError(f"duplicate source volume {e.volume_id}")
        seen.add(e.volume_id)
        stem = _safe(Path(e.path).name.replace(".nii.gz", "").replace(".nii", ""))
        split = e.split if e.split != "unassigned" else "unassigned"
        for p in range(passes):
            name = f"{_safe(e.subject_id)}_{stem}_p{p:04d}"
            vol = out_dir / split / f"{name}.nii.gz"
            jobs.append(GenerationJob(
                index=len(jobs), source=str(resolve_path(e, base)), volume_id=e.volume_id,
                split=split, pass_index=p, seed=derive_seed(master_seed, e.volume_id, p),
                volume_path=str(vol), sidecar_path=str(vol.with_name(name + ".json")),
            ))
    return jobs


def _existing_result(job: GenerationJob) -> Optional[dict]:
    vol, side = Path(job.volume_path), Path(job.sidecar_path)
    if not (vol.exists() and side.exists()):
        return None
    try:
        meta = json.loads(side.read_text())
    except (OSError, json.JSONDecodeError):
        return None
    if meta.get("job_seed") != job.seed:
        return None
    return {"index": job.index, "ok": True, "skipped": True, "rms_score": meta["rms_score"]}


def _run_job(job: GenerationJob, cfg: AugmentConfig, motion: MotionParams, rms: RmsConfig) -> dict:
    done = _existing_result(job)
    if done is not None:
        return done
    try:
        src = read_volume(job.source)
        out, trace, rec = apply_pipeline(src, cfg, motion, job.seed)
        score = trace_score(trace, rms)
        sidecar = trace.to_dict()
        sidecar["rms_score"] = score
        sidecar["augment"] = rec.to_dict()
        sidecar["job_seed"] = job.seed
        sidecar["source"] = job.volume_id
        sidecar["pass_index"] = job.pass_index
        Path(job.volume_path).parent.mkdir(parents=True, exist_ok=True)
        # volume first, sidecar last: a sidecar marks a finished job
        tmp = Path(job.volume_path + ".part")
        write_volume(out, tmp, compress=True)
        os.replace(tmp, job.volume_path)
        Path(job.sidecar_path).write_text(json.dumps(sidecar, indent=1))
        return {"index": job.index, "ok": True, "skipped": False, "rms_score": score}
    except Exception as exc:  # noqa: BLE001 - recorded per job, run continues
        return {"index": job.index, "ok": False, "error": f"{type(exc).__name__}: {exc}",
                "trace": traceback.format_exc(limit=3)}


def _run_job_star(args):
    return _run_job(*args)


def run_generation(
    entries: Sequence[ManifestEntry],
    out_dir,
    cfg: AugmentConfig = AugmentConfig(),
    motion: MotionParams = MotionParams(),
    passes: int = 300,
    master_seed: int = 0,
    workers: int = 1,
    rms: RmsConfig = RmsConfig(),
    bins: BinSpec = BinSpec(),
    max_failure_fraction: float = 0.05,
    base: Path | None = None,
    figures: bool = True,
) -> dict:
    """Generate ``passes`` corrupted copies of every entry; return the run report.

    Writes ``report.json``, ``labels.csv`` and a score histogram figure under
    ``out_dir``. Jobs whose volume and seed-stamped sidecar already exist are
    skipped, so an interrupted run can be resumed by calling this again.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = plan_jobs(entries, passes, master_seed, out_dir, base)
    args = [(j, cfg, motion, rms) for j in jobs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job_star, args, chunksize=1))
    else:
        results = [_run_job_star(a) for a in args]
    results.sort(key=lambda r: r["index"])

    failures = [{"volume": jobs[r["index"]].volume_id, "pass": jobs[r["index"]].pass_index,
                 "error": r["error"]} for r in results if not r["ok"]]
    ok = [r for r in results if r["ok"]]
    scores = np.array([r["rms_score"] for r in ok], dtype=np.float64)
    hist = np.bincount(bins.bin_index(scores), minlength=bins.n_bins) if len(scores) else np.zeros(bins.n_bins, int)

    per_split: dict[str, int] = {}
    with open(out_dir / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABEL_FIELDS)
        for r in ok:
            j = jobs[r["index"]]
            per_split[j.split] = per_split.get(j.split, 0) + 1
            writer.writerow([os.path.relpath(j.volume_path, out_dir), os.path.relpath(j.sidecar_path, out_dir),
                             repr(float(r["rms_score"])), j.split])

    report = {
        "passes": passes,
        "master_seed": int(master_seed),
        "n_sources": len(entries),
        "n_jobs": len(jobs),
        "n_outputs": len(ok),
        "n_skipped": sum(1 for r in ok if r.get("skipped")),
        "n_failed": len(failures),
        "per_split": dict(sorted(per_split.items())),
        "failures": failures,
        "rms_histogram": {
            "edges": [float(x) for x in bins.edges],
            "counts": [int(c) for c in hist],
        },
        "rms_summary": ({"mean": float(scores.mean()), "min": float(scores.min()), "max": float(scores.max())}
                        if len(scores) else {}),
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=1))
    if figures and len(scores):
        from .plotting import plot_rms_histogram
        plot_rms_histogram(report, out_dir / "rms_histogram.png")
    for f in failures:
        log.error("job failed: %s pass %d: %s", f["volume"], f["pass"], f["error"])
    if jobs and len(failures) / len(jobs) > max_failure_fraction:
        raise GenerationError(f"{len(failures)}/{len(jobs)} jobs failed (limit {max_failure_fraction:.0%})")
    return report


def read_labels(path) -> list[dict]:
    """Rows of a generated ``labels.csv``, paths resolved against its directory."""
    path = Path(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append({"path": str(path.parent / row["path"]), "sidecar": str(path.parent / row["sidecar"]),
                         "rms_score": float(row["rms_score"]), "split": row["split"]})
    return rows
