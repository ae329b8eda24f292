from __future__ import annotations

import numpy as np
import pytest

from tilepyramid.pyramid import GroundTruthPyramid, PyramidGeometry
from tilepyramid.synth import SynthConfig, synth_pyramid, synthetic_corpus

# acceptance criteria results, printed in the terminal summary
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {name}: {detail}")


def make_gt(labels, foreground=None, f=2, levels=3) -> GroundTruthPyramid:
    labels = np.asarray(labels, dtype=bool)
    geom = PyramidGeometry(levels, f, labels.shape[1], labels.shape[0])
    if foreground is None:
        foreground = np.ones(geom.grid_shape(geom.top), dtype=bool)
    return GroundTruthPyramid(geom, labels, foreground)


@pytest.fixture(scope="session")
def corpus():
    return synthetic_corpus()


@pytest.fixture
def small_slide():
    return synth_pyramid(SynthConfig(cols=32, rows=32, regions=2, region_radius=4.0, seed=11))
