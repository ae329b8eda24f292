"""Seeded synthetic slides: tissue ellipse, blob-shaped tumours, noisy classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .predictions import NoisyOracle
from .pyramid import GroundTruthPyramid, PyramidGeometry

DEFAULT_SENSITIVITY = (0.9, 0.85, 0.8)
DEFAULT_SPREAD = (0.15, 0.2, 0.25)


@dataclass(frozen=True)
class SynthConfig:
    cols: int = 64
    rows: int = 64
    scale_factor: int = 2
    num_levels: int = 3
    regions: int = 1
    region_radius: float = 4.0
    tissue_fraction: float = 0.6
    seed: int = 0
    sensitivity: tuple = DEFAULT_SENSITIVITY
    spread: tuple = DEFAULT_SPREAD

    def geometry(self) -> PyramidGeometry:
        return PyramidGeometry(self.num_levels, self.scale_factor, self.cols, self.rows)

    def check(self) -> None:
        if self.cols < 1 or self.rows < 1:
            raise ConfigError("grid must be at least 1x1")
        if self.regions < 0:
            raise ConfigError("region count must be >= 0")
        if self.regions and not 0 < self.region_radius <= max(self.cols, self.rows):
            raise ConfigError(f"region radius {self.region_radius} does not fit a {self.cols}x{self.rows} grid")
        if not 0.0 <= self.tissue_fraction <= 1.0:
            raise ConfigError("tissue fraction must be in [0,1]")


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def synth_pyramid(cfg: SynthConfig) -> tuple[GroundTruthPyramid, NoisyOracle]:
    cfg.check()
    geom = cfg.geometry()
    rng = np.random.default_rng(cfg.seed)
    yy, xx = np.mgrid[0 : cfg.rows, 0 : cfg.cols] + 0.5

    if cfg.tissue_fraction >= 1.0:
        tissue = np.ones((cfg.rows, cfg.cols), dtype=bool)
    elif cfg.tissue_fraction <= 0.0:
        tissue = np.zeros((cfg.rows, cfg.cols), dtype=bool)
    else:
        # ellipse whose area is tissue_fraction of the grid
        s = math.sqrt(4.0 * cfg.tissue_fraction / math.pi)
        cy = cfg.rows / 2 + rng.uniform(-0.05, 0.05) * cfg.rows
        cx = cfg.cols / 2 + rng.uniform(-0.05, 0.05) * cfg.cols
        a, b = s * cfg.cols / 2, s * cfg.rows / 2
        tissue = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0

    tumour = np.zeros_like(tissue)
    candidates = np.argwhere(tissue) if tissue.any() else np.argwhere(np.ones_like(tissue))
    for _ in range(cfg.regions):
        cy, cx = candidates[rng.integers(len(candidates))] + 0.5
        r = cfg.region_radius
        tumour |= _disk(yy, xx, cy, cx, r)
        for _lobe in range(2):
            angle = rng.uniform(0.0, 2.0 * math.pi)
            tumour |= _disk(yy, xx, cy + 0.8 * r * math.sin(angle), cx + 0.8 * r * math.cos(angle), r / 2)

    fg = tissue | tumour
    for n in range(1, geom.num_levels):
        fg = geom.pool_any(fg, n)
    gt = GroundTruthPyramid(geom, tumour, fg)
    oracle = NoisyOracle(gt, cfg.sensitivity, cfg.spread, seed=cfg.seed)
    return gt, oracle


@dataclass
class CorpusImage:
    name: str
    config: SynthConfig
    gt: GroundTruthPyramid = field(repr=False)
    src: NoisyOracle = field(repr=False)


def synthetic_corpus(n: int = 20, seed: int = 2024, max_density: float = 0.10) -> list[CorpusImage]:
    """Varied slides on f=2, 3-level pyramids with level-0 grids between 64 and 128 tiles a side.

    Each image's tumour density among foreground level-0 tiles is kept at or
    below `max_density` by shrinking the tumours until it fits.
    """
    rng = np.random.default_rng(seed)
    images = []
    for i in range(n):
        side = int(rng.choice([64, 96, 128]))
        cfg = SynthConfig(
            cols=side,
            rows=int(side * rng.choice([0.75, 1.0])),
            regions=int(rng.choice([0, 1, 2, 2, 3, 4])),
            region_radius=float(rng.uniform(2.0, 0.12 * side)),
            tissue_fraction=float(rng.uniform(0.4, 0.8)),
            seed=int(rng.integers(2**31)),
        )
        gt, src = synth_pyramid(cfg)
        while gt.positive_density > max_density:
            cfg = replace(cfg, region_radius=cfg.region_radius * 0.8)
            gt, src = synth_pyramid(cfg)
        images.append(CorpusImage(f"img{i:02d}", cfg, gt, src))
    return images


def cluster_images(seed: int = 7) -> list[CorpusImage]:
    """Three slides: one large tumour, several small ones, and a tumour-free slide."""
    specs = [
        ("large", SynthConfig(cols=64, rows=64, regions=1, region_radius=12.0, seed=seed)),
        ("small", SynthConfig(cols=64, rows=64, regions=6, region_radius=2.5, seed=seed + 1)),
        ("negative", SynthConfig(cols=64, rows=64, regions=0, seed=seed + 2)),
    ]
    out = []
    for name, cfg in specs:
        gt, src = synth_pyramid(cfg)
        out.append(CorpusImage(name, cfg, gt, src))
    return out
