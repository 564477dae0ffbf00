import logging
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from oshp.data import DatasetManifest, ManifestEntry, save_mask

logging.getLogger("oshp").setLevel(logging.WARNING)


def write_manifest(root: Path, class_names, items) -> DatasetManifest:
    """Build a manifest from ``(mask_array, split)`` items; images are random noise."""
    rng = np.random.default_rng(0)
    root = Path(root)
    entries = []
    for i, (mask, split) in enumerate(items):
        mask = np.asarray(mask, dtype=np.uint8)
        img_path = root / "images" / f"{i:04d}.png"
        mask_path = root / "masks" / f"{i:04d}.png"
        img_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rng.integers(0, 256, size=mask.shape + (3,), dtype=np.uint8)).save(img_path)
        save_mask(mask, mask_path)
        entries.append(ManifestEntry(img_path.resolve(), mask_path.resolve(), split))
    manifest = DatasetManifest(entries, list(class_names))
    manifest.save(root / "manifest.jsonl")
    return manifest


@pytest.fixture
def toy_names():
    return ["background", "head", "torso", "left_leg", "right_leg", "hat"]


_criteria: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    details = [str(v) for k, v in item.user_properties if k == "detail"]
    if details:
        title = f"{title} [{'; '.join(details)}]"
    if report.failed:
        _criteria[number] = ("FAIL", title)
    elif report.when == "call" and _criteria.get(number, ("PASS",))[0] == "PASS":
        _criteria[number] = ("PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}")
