from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from tsrlmm.dataset import ClassRef, SimilarityGroups, TemplateCatalog, load_similarity_groups
from tsrlmm.lmm import BackendConfig, MockBackend, MockScript
from tsrlmm.synthetic import SyntheticDataset, make_synthetic_dataset


class FakeClock:
    """Deterministic clock: ``monotonic``/``sleep`` for backends, calling it ticks 1 ms."""

    def __init__(self, start: float = 1000.0, tick: float = 0.001):
        self.t = start
        self.tick = tick
        self.sleeps: list[float] = []

    def monotonic(self) -> float:
        return self.t

    def sleep(self, seconds: float) -> None:
        self.sleeps.append(seconds)
        self.t += max(0.0, seconds)

    def __call__(self) -> float:
        self.t += self.tick
        return self.t


@pytest.fixture
def fake_clock() -> FakeClock:
    return FakeClock()


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory) -> SyntheticDataset:
    return make_synthetic_dataset(tmp_path_factory.mktemp("syn"))


@pytest.fixture(scope="session")
def synthetic_groups(synthetic) -> SimilarityGroups:
    return load_similarity_groups(synthetic.groups_path, synthetic.catalog)


@pytest.fixture
def echo_backend(synthetic) -> MockBackend:
    return MockBackend(BackendConfig(), MockScript.load(synthetic.mock_script_path))


def make_catalog(tmp_path: Path, ids: list[str]) -> TemplateCatalog:
    """Tiny catalog with solid-color template images."""
    from tsrlmm.extraction import save_png

    paths = {}
    for i, cid in enumerate(ids):
        p = tmp_path / "templates" / f"{cid}.png"
        p.parent.mkdir(parents=True, exist_ok=True)
        save_png(np.full((8, 8, 3), 20 * i, dtype=np.uint8), p)
        paths[cid] = p
    return TemplateCatalog(tuple(ClassRef(c, c.replace("_", " ").title()) for c in ids), paths)


@pytest.fixture(scope="session")
def synthetic_bank(synthetic, synthetic_groups, tmp_path_factory):
    from tsrlmm.knowledge import build_bank

    backend = MockBackend(BackendConfig(), MockScript.load(synthetic.mock_script_path))
    path = tmp_path_factory.mktemp("bank") / "bank.json"
    return build_bank(synthetic.catalog, synthetic_groups, backend, path=path)


@pytest.fixture(scope="session")
def synthetic_prepared(synthetic):
    from tsrlmm.evaluation import prepare_manifest

    return prepare_manifest(synthetic.manifest, clock=FakeClock())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
