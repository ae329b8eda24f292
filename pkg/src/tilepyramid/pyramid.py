"""Tile-grid geometry of a multi-resolution image and its ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigError, DataError


class TileId(NamedTuple):
    level: int
    col: int
    row: int


def tile_order(t: TileId) -> tuple[int, int, int]:
    """Sort key for deterministic iteration: coarsest level first, then row-major."""
    return (-t.level, t.row, t.col)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class PyramidGeometry:
    num_levels: int
    scale_factor: int
    grid_cols_l0: int
    grid_rows_l0: int
    tile_px: int = 224

    def __post_init__(self):
        if self.num_levels < 2:
            raise ConfigError("a pyramid needs at least two levels")
        if self.scale_factor < 2:
            raise ConfigError("scale factor must be >= 2")
        if self.grid_cols_l0 < 1 or self.grid_rows_l0 < 1:
            raise ConfigError("level-0 grid must be at least 1x1")

    @property
    def top(self) -> int:
        """Index of the lowest-resolution level."""
        return self.num_levels - 1

    def grid_shape(self, level: int) -> tuple[int, int]:
        """(rows, cols) of the tile grid at `level`."""
        self._check_level(level)
        s = self.scale_factor**level
        return _ceil_div(self.grid_rows_l0, s), _ceil_div(self.grid_cols_l0, s)

    def contains(self, t: TileId) -> bool:
        if not 0 <= t.level <= self.top:
            return False
        rows, cols = self.grid_shape(t.level)
        return 0 <= t.col < cols and 0 <= t.row < rows

    def tiles(self, level: int) -> Iterator[TileId]:
        rows, cols = self.grid_shape(level)
        for r in range(rows):
            for c in range(cols):
                yield TileId(level, c, r)

    def children(self, t: TileId) -> list[TileId]:
        if t.level < 1:
            raise DataError("level-0 tiles have no children")
        if not self.contains(t):
            raise DataError(f"tile {t} outside geometry")
        f = self.scale_factor
        rows, cols = self.grid_shape(t.level - 1)
        return [
            TileId(t.level - 1, c, r)
            for r in range(t.row * f, min((t.row + 1) * f, rows))
            for c in range(t.col * f, min((t.col + 1) * f, cols))
        ]

    def parent(self, t: TileId) -> TileId:
        if t.level >= self.top:
            raise DataError("top-level tiles have no parent")
        f = self.scale_factor
        return TileId(t.level + 1, t.col // f, t.row // f)

    def ancestor(self, t: TileId, level: int) -> TileId:
        s = self.scale_factor ** (level - t.level)
        return TileId(level, t.col // s, t.row // s)

    def level0_span(self, t: TileId) -> tuple[slice, slice]:
        """(row slice, col slice) of the level-0 descendants of `t`."""
        s = self.scale_factor**t.level
        return (
            slice(t.row * s, min((t.row + 1) * s, self.grid_rows_l0)),
            slice(t.col * s, min((t.col + 1) * s, self.grid_cols_l0)),
        )

    def upsample(self, mask: np.ndarray, level: int) -> np.ndarray:
        """Expand a level-`level` grid onto level-(level-1), cropping border overhang."""
        f = self.scale_factor
        rows, cols = self.grid_shape(level - 1)
        return np.repeat(np.repeat(mask, f, axis=0), f, axis=1)[:rows, :cols]

    def expand_to_level0(self, grid: np.ndarray, level: int) -> np.ndarray:
        s = self.scale_factor**level
        return np.repeat(np.repeat(grid, s, axis=0), s, axis=1)[: self.grid_rows_l0, : self.grid_cols_l0]

    def pool_any(self, mask: np.ndarray, level: int) -> np.ndarray:
        """OR-pool a level-(level-1) boolean grid up to `level`."""
        f = self.scale_factor
        rows, cols = self.grid_shape(level)
        padded = np.zeros((rows * f, cols * f), dtype=bool)
        padded[: mask.shape[0], : mask.shape[1]] = mask
        return padded.reshape(rows, f, cols, f).any(axis=(1, 3))

    def _check_level(self, level: int) -> None:
        if not 0 <= level <= self.top:
            raise DataError(f"level {level} outside pyramid 0..{self.top}")


@dataclass(frozen=True, eq=False)
class GroundTruthPyramid:
    """Level-0 tumour labels plus the tissue mask at the top level.

    Labels above level 0 are derived: a tile is positive iff any of its level-0
    descendants is.
    """

    geometry: PyramidGeometry
    level0_labels: np.ndarray
    foreground: np.ndarray
    _labels: list = field(init=False, repr=False)
    _reachable: list = field(init=False, repr=False)

    def __post_init__(self):
        g = self.geometry
        labels0 = np.asarray(self.level0_labels, dtype=bool)
        fg = np.asarray(self.foreground, dtype=bool)
        if labels0.shape != g.grid_shape(0):
            raise DataError(f"label grid {labels0.shape} != level-0 grid {g.grid_shape(0)}")
        if fg.shape != g.grid_shape(g.top):
            raise DataError(f"foreground grid {fg.shape} != level-{g.top} grid {g.grid_shape(g.top)}")
        labels0.setflags(write=False)
        fg.setflags(write=False)
        object.__setattr__(self, "level0_labels", labels0)
        object.__setattr__(self, "foreground", fg)

        labels = [labels0]
        for n in range(1, g.num_levels):
            labels.append(g.pool_any(labels[-1], n))
        reachable = [None] * g.num_levels
        reachable[g.top] = fg
        for n in range(g.top, 0, -1):
            reachable[n - 1] = g.upsample(reachable[n], n)
        for arr in labels + reachable:
            arr.setflags(write=False)
        object.__setattr__(self, "_labels", labels)
        object.__setattr__(self, "_reachable", reachable)

        if np.any(labels0 & ~reachable[0]):
            r, c = np.argwhere(labels0 & ~reachable[0])[0]
            raise DataError(f"positive tile (0,{c},{r}) has no foreground ancestor")

    def labels(self, level: int) -> np.ndarray:
        return self._labels[level]

    def label(self, t: TileId) -> bool:
        return bool(self._labels[t.level][t.row, t.col])

    def reachable(self, level: int) -> np.ndarray:
        """Tiles at `level` that descend from a foreground top-level tile."""
        return self._reachable[level]

    def roots(self) -> list[TileId]:
        rows, cols = np.nonzero(self.foreground)
        return [TileId(self.geometry.top, int(c), int(r)) for r, c in zip(rows, cols)]

    @property
    def positive_density(self) -> float:
        n = int(self._reachable[0].sum())
        return float(self.level0_labels.sum()) / n if n else 0.0

    def __eq__(self, other):
        if not isinstance(other, GroundTruthPyramid):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and np.array_equal(self.level0_labels, other.level0_labels)
            and np.array_equal(self.foreground, other.foreground)
        )
