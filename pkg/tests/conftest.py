from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from reeflora import LoraConfig, ModelConfig
from reeflora.data import Manifest, TileRecord, write_raster

TOY = ModelConfig(image_size=64, patch_size=16, embed_dim=32, depth=2, heads=2)
TINY = ModelConfig(image_size=32, patch_size=8, embed_dim=16, depth=2, heads=2)


def distinct_labels(n: int, n_classes: int = 8, seed: int = 0) -> np.ndarray:
    rs = np.random.default_rng(seed)
    while True:
        labels = rs.integers(0, 2, (n, n_classes))
        if len({tuple(r) for r in labels}) == n:
            return labels


def write_tiles(root: Path, n: int, size: int, seed: int = 0, sites=("TTB",), seasons=("dry",),
                labels=None) -> Manifest:
    """n random tiles, one per source image, with a manifest rooted at ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    rs = np.random.default_rng(seed)
    labels = distinct_labels(n, seed=seed) if labels is None else labels
    recs = []
    for i in range(n):
        write_raster(root / f"t{i}.png", rs.integers(0, 256, (size, size, 3), dtype=np.uint8))
        recs.append(TileRecord(f"t{i}.png", f"img{i:03d}", 0, 0, 0, tuple(int(v) for v in labels[i]),
                               sites[i % len(sites)], seasons[i % len(seasons)]))
    m = Manifest(recs, tile_size=size, root=root)
    m.write(root / "manifest.jsonl")
    return Manifest.read(root / "manifest.jsonl")


@pytest.fixture
def toy_manifest(tmp_path) -> Manifest:
    return write_tiles(tmp_path / "toy", 8, TOY.image_size)


@pytest.fixture
def toy_config() -> ModelConfig:
    return TOY


@pytest.fixture
def tiny_config() -> ModelConfig:
    return TINY


@pytest.fixture
def lora4() -> LoraConfig:
    return LoraConfig(rank=4)


# -- acceptance reporting ----------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title, tolerance): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title, tol = mark.args
    status = "PASS" if rep.passed else "FAIL"
    if number in _ACCEPTANCE and _ACCEPTANCE[number][2] == "FAIL":
        return
    _ACCEPTANCE[number] = (title, tol, status, call.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, tol, status, secs = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} [{number:>2}] {title} (tolerance: {tol}; {secs:.2f}s)")
