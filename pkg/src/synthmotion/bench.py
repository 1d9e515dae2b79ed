"""Generation throughput benchmark: wall time, speedup and peak memory per worker count.

Each worker setting runs in a freshly spawned process so that timings and
peak-RSS readings are not polluted by the caller or by earlier settings.
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import os
import resource
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from .augment import AugmentConfig
from .dataset import ManifestEntry, run_generation
from .kspace import MotionParams
from .phantom import head_phantom
from .volume import write_volume

log = logging.getLogger(__name__)

FULL_SOURCE_DIMS = (176, 208, 176)
# 100 full-size volumes on an 8-core desktop, 8 workers
BUDGET_100_8CORE_S = 150.0


def _make_sources(root: Path, n_sources: int, dims, seed: int) -> list[ManifestEntry]:
    entries = []
    for i in range(n_sources):
        rel = f"sources/bench-{i:02d}.nii.gz"
        path = root / rel
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            write_volume(head_phantom(dims, (1.0, 1.0, 1.0), seed=seed + i), path)
        entries.append(ManifestEntry(f"bench-{i:02d}", "site-00", rel, 4, None))
    return entries


def _peak_rss_mb(who) -> float:
    # Linux reports ru_maxrss in KiB
    return resource.getrusage(who).ru_maxrss / 1024.0


def _timed_run(args) -> dict:
    entries, out_dir, cfg, motion, passes, workers, base = args
    t0 = time.perf_counter()
    report = run_generation(entries, out_dir, cfg, motion, passes=passes, master_seed=0, workers=workers,
                            base=base, figures=False)
    elapsed = time.perf_counter() - t0
    own = _peak_rss_mb(resource.RUSAGE_SELF)
    kids = _peak_rss_mb(resource.RUSAGE_CHILDREN)
    return {"seconds": elapsed, "n_outputs": report["n_outputs"], "n_failed": report["n_failed"],
            "peak_rss_mb": kids if workers > 1 else own}


def run_benchmark(out_dir, n_volumes: int = 100, worker_counts: Sequence[int] = (1, 8),
                  source_dims=FULL_SOURCE_DIMS, cfg: AugmentConfig = AugmentConfig(),
                  motion: MotionParams = MotionParams(), seed: int = 0, keep_outputs: bool = False) -> dict:
    """Time ``n_volumes`` generations at each worker count; write and return ``bench.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_sources = 4 if n_volumes % 4 == 0 else 1
    passes = n_volumes // n_sources
    entries = _make_sources(out_dir, n_sources, source_dims, seed)
    ctx = mp.get_context("spawn")
    runs = []
    for w in worker_counts:
        gen_dir = out_dir / f"gen-w{w}"
        shutil.rmtree(gen_dir, ignore_errors=True)
        # executor workers are not daemonic, so the run may start its own pool
        with ProcessPoolExecutor(1, mp_context=ctx) as pool:
            res = pool.submit(_timed_run, (entries, gen_dir, cfg, motion, passes, w, out_dir)).result()
        res.update(workers=w, per_volume_s=res["seconds"] / max(n_volumes, 1))
        log.info("workers=%d: %.1f s for %d volumes, peak %.0f MB", w, res["seconds"], n_volumes, res["peak_rss_mb"])
        runs.append(res)
        if not keep_outputs:
            shutil.rmtree(gen_dir, ignore_errors=True)
    base = runs[0]["seconds"]
    for r in runs:
        r["speedup"] = base / r["seconds"]
    report = {
        "cpu_count": os.cpu_count(),
        "n_volumes": n_volumes,
        "roi": list(cfg.roi),
        "max_transforms": motion.n_transforms_range[1],
        "runs": runs,
        "budget_s_100_volumes_8_workers": BUDGET_100_8CORE_S,
    }
    (out_dir / "bench.json").write_text(json.dumps(report, indent=1))
    from .plotting import plot_scaling
    plot_scaling(report, out_dir / "bench_scaling.png")
    return report
