"""Per-tile probability providers standing in for the per-level classifiers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, MissingPredictionError
from .pyramid import GroundTruthPyramid, PyramidGeometry, TileId, tile_order


class PredictionSource:
    """Read-only map from tiles to probabilities, exposed per tile and per level.

    ``level_array`` returns a dense grid with NaN where no prediction exists.
    """

    geometry: PyramidGeometry

    def level_array(self, level: int) -> np.ndarray:
        raise NotImplementedError

    def predict(self, t: TileId) -> float:
        if not self.geometry.contains(t):
            raise DataError(f"tile {t} outside geometry")
        p = self.level_array(t.level)[t.row, t.col]
        if np.isnan(p):
            raise MissingPredictionError(t)
        return float(p)


@dataclass(frozen=True)
class PredictionEntry:
    probability: float
    label: bool


class PredictionTable(dict):
    """TileId -> PredictionEntry."""

    def validate(self) -> None:
        for t, e in self.items():
            if not 0.0 <= e.probability <= 1.0:
                raise DataError(f"probability {e.probability} out of [0,1] at {t}")

    def levels(self) -> set[int]:
        return {t.level for t in self}

    def level_view(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        """(probabilities, labels) of all entries at one level, in tile order."""
        keys = sorted((t for t in self if t.level == level), key=tile_order)
        if not keys:
            raise DataError(f"no predictions for level {level}")
        p = np.array([self[t].probability for t in keys], dtype=float)
        y = np.array([self[t].label for t in keys], dtype=bool)
        return p, y

    @classmethod
    def from_source(cls, gt: GroundTruthPyramid, src: PredictionSource) -> "PredictionTable":
        """Tabulate every foreground-descended tile at every level."""
        table = cls()
        for n in range(gt.geometry.top, -1, -1):
            probs = src.level_array(n)
            labels = gt.labels(n)
            rows, cols = np.nonzero(gt.reachable(n))
            for r, c in zip(rows.tolist(), cols.tolist()):
                t = TileId(n, c, r)
                p = probs[r, c]
                if np.isnan(p):
                    raise MissingPredictionError(t)
                table[t] = PredictionEntry(float(p), bool(labels[r, c]))
        return table


class TableBacked(PredictionSource):
    def __init__(self, geometry: PyramidGeometry, table: Mapping[TileId, PredictionEntry]):
        self.geometry = geometry
        self.table = table
        arrays = [np.full(geometry.grid_shape(n), np.nan) for n in range(geometry.num_levels)]
        for t, e in table.items():
            if not geometry.contains(t):
                raise DataError(f"table entry {t} outside geometry")
            arrays[t.level][t.row, t.col] = e.probability
        for a in arrays:
            a.setflags(write=False)
        self._arrays = arrays

    def level_array(self, level: int) -> np.ndarray:
        return self._arrays[level]


def _beta_draws(rng: np.random.Generator, mean: float, spread: float, shape) -> np.ndarray:
    # spread is the fraction of the maximal variance mean*(1-mean) kept
    if spread == 0.0 or mean in (0.0, 1.0):
        return np.full(shape, mean)
    concentration = 1.0 / spread - 1.0
    return rng.beta(mean * concentration, (1.0 - mean) * concentration, size=shape)


class NoisyOracle(PredictionSource):
    """Seeded synthetic classifier.

    Positive tiles draw from a Beta distribution with mean ``sensitivity[level]``,
    negatives from the mirrored one (mean ``1 - sensitivity[level]``).
    ``spread[level]`` in [0, 1) is the variance as a fraction of ``m * (1 - m)``;
    zero spread collapses the draw onto the mean. All levels are drawn once at
    construction, so repeated queries agree.
    """

    def __init__(
        self,
        gt: GroundTruthPyramid,
        sensitivity: Sequence[float],
        spread: Sequence[float],
        seed: int,
    ):
        g = gt.geometry
        if len(sensitivity) != g.num_levels or len(spread) != g.num_levels:
            raise ConfigError(f"oracle needs one sensitivity and one spread per level ({g.num_levels})")
        for m, s in zip(sensitivity, spread):
            if not 0.0 <= m <= 1.0:
                raise ConfigError(f"sensitivity {m} outside [0,1]")
            if not 0.0 <= s < 1.0:
                raise ConfigError(f"spread {s} outside [0,1)")
        self.geometry = g
        self.sensitivity = tuple(float(m) for m in sensitivity)
        self.spread = tuple(float(s) for s in spread)
        self.seed = seed
        arrays = []
        for n in range(g.num_levels):
            rng = np.random.default_rng([seed, n])
            shape = g.grid_shape(n)
            pos = _beta_draws(rng, self.sensitivity[n], self.spread[n], shape)
            neg = _beta_draws(rng, 1.0 - self.sensitivity[n], self.spread[n], shape)
            a = np.clip(np.where(gt.labels(n), pos, neg), 0.0, 1.0)
            a.setflags(write=False)
            arrays.append(a)
        self._arrays = arrays

    def level_array(self, level: int) -> np.ndarray:
        return self._arrays[level]
