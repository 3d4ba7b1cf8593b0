from __future__ import annotations

import numpy as np
import pytest

from vpgkit import scenegen as sg
from vpgkit.decoder import ModelConfig
from vpgkit.vocab import default_vocab
from vpgkit.vpgc import Backbone

MICRO = dict(n_layers=4, d=8, heads=2, n_queries=2, max_len=64)


def micro_backbone(vpg: str = "qformer", seed: int = 0) -> Backbone:
    """L=4, d=8, K=2 and a 16x16 canvas cut into a 2x2 grid."""
    cfg = ModelConfig(vocab_size=len(default_vocab()), **MICRO)
    bb = Backbone(cfg, vpg=vpg, patch=8, image_size=16, resampler_layers=1, resampler_heads=1, seed=seed)
    bb.freeze()
    return bb


def random_raster(rng: np.random.Generator, size: int = 16) -> sg.Raster:
    return sg.Raster(size, size, rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8))


@pytest.fixture
def micro():
    return micro_backbone()


def small_backbone(seed: int = 0) -> Backbone:
    """A cheap backbone on the default 64x64 canvas (8x8 grid)."""
    cfg = ModelConfig(vocab_size=len(default_vocab()), n_layers=2, d=16, heads=2, n_queries=4, max_len=128)
    bb = Backbone(cfg, patch=8, image_size=64, resampler_layers=1, resampler_heads=1, seed=seed)
    bb.freeze()
    return bb


@pytest.fixture(scope="session")
def small():
    return small_backbone()


# --- acceptance reporting ---------------------------------------------------------

_CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None or (report.when != "call" and report.outcome == "passed"):
        return
    number, title = marker
    outcomes = _CRITERIA.setdefault(number, (title, []))[1]
    outcomes.append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[number]
        ok = outcomes and all(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
