import os

import pytest
from hypothesis import settings

from synthmotion.augment import AugmentConfig
from synthmotion.dataset import ManifestEntry, write_manifest
from synthmotion.phantom import head_phantom
from synthmotion.volume import write_volume

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

TINY_AUGMENT = AugmentConfig(roi=(20, 20, 20), elastic_grid=(3, 3, 3))


def make_tiny_sources(root, n: int, dims=(24, 26, 22), seed: int = 0):
    entries = []
    for i in range(n):
        rel = f"src/sub-{i:02d}_T1w.nii.gz"
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_volume(head_phantom(dims, (3.0, 3.0, 3.0), seed=seed + i), path)
        entries.append(ManifestEntry(f"sub-{i:02d}", f"site-{i % 3}", rel, 4, None, "train"))
    write_manifest(entries, root / "manifest.csv")
    return entries


@pytest.fixture
def tiny_sources(tmp_path):
    return tmp_path, make_tiny_sources(tmp_path, 2)


def pytest_report_header(config):
    return f"cpu_count: {os.cpu_count()}"


# acceptance criteria outcomes, printed once at the end of the session
CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = (ok, detail)
    print(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
