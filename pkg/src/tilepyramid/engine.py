"""Single-worker pyramidal and reference executions, metrics and cost model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, IntegrityError, MissingPredictionError, UndefinedMetricError
from .predictions import PredictionSource
from .pyramid import GroundTruthPyramid, PyramidGeometry, TileId

ABSENT = -1


class Decision(IntEnum):
    STOP = 0
    ZOOM = 1
    POS = 2

    @property
    def code(self) -> str:
        return _CODES[self]

    @classmethod
    def from_code(cls, code: str) -> "Decision":
        try:
            return _FROM_CODES[code]
        except KeyError:
            raise DataError(f"unknown decision code {code!r}") from None


_CODES = {Decision.STOP: "stop", Decision.ZOOM: "zoom", Decision.POS: "pos"}
_FROM_CODES = {v: k for k, v in _CODES.items()}


@dataclass(frozen=True)
class ThresholdSchedule:
    """Zoom-in threshold per level 1..N plus the level-0 positive threshold."""

    thresholds: Mapping[int, float]
    positive_threshold_l0: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "thresholds", {int(k): float(v) for k, v in self.thresholds.items()})
        for v in [*self.thresholds.values(), self.positive_threshold_l0]:
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"threshold {v} outside [0,1]")
        if 0 in self.thresholds:
            raise ConfigError("level 0 takes positive_threshold_l0, not a zoom threshold")

    @classmethod
    def uniform(cls, top: int, value: float, positive_threshold_l0: float = 0.5) -> "ThresholdSchedule":
        return cls({n: value for n in range(1, top + 1)}, positive_threshold_l0)

    @classmethod
    def pass_through(cls, top: int, positive_threshold_l0: float = 0.5) -> "ThresholdSchedule":
        return cls.uniform(top, 0.0, positive_threshold_l0)

    def with_level(self, level: int, value: float) -> "ThresholdSchedule":
        return ThresholdSchedule({**self.thresholds, level: value}, self.positive_threshold_l0)

    def require(self, geometry: PyramidGeometry) -> None:
        missing = [n for n in range(1, geometry.num_levels) if n not in self.thresholds]
        if missing:
            raise ConfigError(f"schedule has no threshold for levels {missing}")

    def decide(self, level: int, p: float) -> Decision:
        if level == 0:
            return Decision.POS if p >= self.positive_threshold_l0 else Decision.STOP
        return Decision.ZOOM if p >= self.thresholds[level] else Decision.STOP


class ExecutionTree:
    """Analyzed tiles with their probability and decision, stored as per-level grids.

    Absent tiles hold NaN / -1. Parent-child links are implicit in the geometry.
    """

    def __init__(self, geometry: PyramidGeometry, probs: Sequence[np.ndarray] | None = None,
                 decisions: Sequence[np.ndarray] | None = None):
        self.geometry = geometry
        if probs is None:
            probs = [np.full(geometry.grid_shape(n), np.nan) for n in range(geometry.num_levels)]
            decisions = [np.full(geometry.grid_shape(n), ABSENT, dtype=np.int8) for n in range(geometry.num_levels)]
        self._p = list(probs)
        self._d = list(decisions)

    # -- node access
    def add(self, t: TileId, p: float, decision: Decision) -> None:
        cur = self._d[t.level][t.row, t.col]
        if cur != ABSENT:
            if cur != decision or self._p[t.level][t.row, t.col] != p:
                raise IntegrityError(f"conflicting node {t}")
            raise IntegrityError(f"tile {t} analyzed twice")
        self._p[t.level][t.row, t.col] = p
        self._d[t.level][t.row, t.col] = decision

    def __contains__(self, t: TileId) -> bool:
        return self.geometry.contains(t) and self._d[t.level][t.row, t.col] != ABSENT

    def node(self, t: TileId) -> tuple[float, Decision]:
        if t not in self:
            raise KeyError(t)
        return float(self._p[t.level][t.row, t.col]), Decision(int(self._d[t.level][t.row, t.col]))

    def nodes(self) -> Iterator[tuple[TileId, float, Decision]]:
        """All nodes in traversal order (coarsest level first, row-major)."""
        for n in range(self.geometry.top, -1, -1):
            rows, cols = np.nonzero(self._d[n] != ABSENT)
            for r, c in zip(rows.tolist(), cols.tolist()):
                yield TileId(n, c, r), float(self._p[n][r, c]), Decision(int(self._d[n][r, c]))

    def __len__(self) -> int:
        return self.total

    def probabilities(self, level: int) -> np.ndarray:
        return self._p[level]

    def decisions(self, level: int) -> np.ndarray:
        return self._d[level]

    def analyzed(self, level: int) -> np.ndarray:
        return self._d[level] != ABSENT

    def analyzed_count(self, level: int) -> int:
        return int(np.count_nonzero(self._d[level] != ABSENT))

    def counts(self) -> dict[int, int]:
        return {n: self.analyzed_count(n) for n in range(self.geometry.top, -1, -1)}

    @property
    def total(self) -> int:
        return sum(self.counts().values())

    def detected_positive(self) -> np.ndarray:
        return self._d[0] == Decision.POS

    def roots(self) -> list[TileId]:
        top = self.geometry.top
        rows, cols = np.nonzero(self.analyzed(top))
        return [TileId(top, int(c), int(r)) for r, c in zip(rows, cols)]

    # -- merging
    def merge(self, other: "ExecutionTree", strict: bool = False) -> "ExecutionTree":
        """Union of node sets. Identical duplicates are tolerated unless `strict`."""
        if other.geometry != self.geometry:
            raise IntegrityError("cannot merge trees over different geometries")
        probs, decs = [], []
        for n in range(self.geometry.num_levels):
            a, b = self._d[n] != ABSENT, other._d[n] != ABSENT
            both = a & b
            if both.any():
                clash = both & ((self._d[n] != other._d[n]) | (self._p[n] != other._p[n]))
                if clash.any():
                    r, c = np.argwhere(clash)[0]
                    raise IntegrityError(f"conflicting node {TileId(n, int(c), int(r))}")
                if strict:
                    r, c = np.argwhere(both)[0]
                    raise IntegrityError(f"tile {TileId(n, int(c), int(r))} analyzed by more than one worker")
            probs.append(np.where(b, other._p[n], self._p[n]))
            decs.append(np.where(b, other._d[n], self._d[n]).astype(np.int8))
        return ExecutionTree(self.geometry, probs, decs)

    def check_invariants(self, gt: GroundTruthPyramid | None = None) -> None:
        g = self.geometry
        if np.any(self._d[0] == Decision.ZOOM):
            raise IntegrityError("level-0 node with zoom-in decision")
        for n in range(1, g.num_levels):
            if np.any(self._d[n] == Decision.POS):
                raise IntegrityError(f"positive-detection decision above level 0 (level {n})")
            expected = g.upsample(self._d[n] == Decision.ZOOM, n)
            if not np.array_equal(expected, self.analyzed(n - 1)):
                bad = np.argwhere(expected != self.analyzed(n - 1))[0]
                raise IntegrityError(
                    f"level-{n - 1} tile (col={bad[1]}, row={bad[0]}) inconsistent with its parent's decision"
                )
        if gt is not None and not np.array_equal(self.analyzed(g.top), gt.foreground):
            raise IntegrityError("roots differ from the foreground tiles")

    def __eq__(self, other):
        if not isinstance(other, ExecutionTree):
            return NotImplemented
        return self.geometry == other.geometry and all(
            np.array_equal(a, b) and np.array_equal(p, q, equal_nan=True)
            for a, b, p, q in zip(self._d, other._d, self._p, other._p)
        )

    def copy(self) -> "ExecutionTree":
        return ExecutionTree(self.geometry, [p.copy() for p in self._p], [d.copy() for d in self._d])


def _level_probs(src: PredictionSource, active: np.ndarray, level: int) -> np.ndarray:
    p = src.level_array(level)
    missing = active & np.isnan(p)
    if missing.any():
        r, c = np.argwhere(missing)[0]
        raise MissingPredictionError(TileId(level, int(c), int(r)))
    return p


def run_pyramidal(gt: GroundTruthPyramid, src: PredictionSource, sched: ThresholdSchedule,
                  metadata=None) -> ExecutionTree:
    """Coarse-to-fine execution from the foreground tiles of the top level.

    `metadata` is accepted for decision blocks that use it; thresholds ignore it.
    """
    g = gt.geometry
    sched.require(g)
    tree = ExecutionTree(g)
    active = gt.foreground
    for n in range(g.top, -1, -1):
        p = _level_probs(src, active, n)
        if n > 0:
            hit = active & (p >= sched.thresholds[n])
            code = Decision.ZOOM
        else:
            hit = active & (p >= sched.positive_threshold_l0)
            code = Decision.POS
        tree._p[n] = np.where(active, p, np.nan)
        tree._d[n] = np.where(hit, code, np.where(active, Decision.STOP, ABSENT)).astype(np.int8)
        if n > 0:
            active = g.upsample(hit, n)
    return tree


def run_reference(gt: GroundTruthPyramid, src: PredictionSource, positive_threshold_l0: float = 0.5) -> ExecutionTree:
    """Flat execution: every foreground-descended level-0 tile."""
    g = gt.geometry
    tree = ExecutionTree(g)
    active = gt.reachable(0)
    p = _level_probs(src, active, 0)
    tree._p[0] = np.where(active, p, np.nan)
    tree._d[0] = np.where(
        active & (p >= positive_threshold_l0), Decision.POS, np.where(active, Decision.STOP, ABSENT)
    ).astype(np.int8)
    return tree


def true_positive_reference(ref: ExecutionTree, gt: GroundTruthPyramid) -> np.ndarray:
    return ref.detected_positive() & gt.labels(0)


def positive_retention(pyr: ExecutionTree, ref: ExecutionTree, gt: GroundTruthPyramid) -> float:
    if pyr.geometry != ref.geometry:
        raise DataError("trees have different geometries")
    tp_ref = true_positive_reference(ref, gt)
    n = int(tp_ref.sum())
    if n == 0:
        raise UndefinedMetricError("reference detects no true positive tile")
    return int((tp_ref & pyr.detected_positive()).sum()) / n


def slowdown_bound(f: int, levels: int | None = None) -> float:
    """Worst-case ratio of pyramidal to reference tile counts for scale factor `f`."""
    if f < 2:
        raise DataError("scale factor must be >= 2")
    if levels is None:
        return f * f / (f * f - 1)
    return math.fsum(f ** (-2 * n) for n in range(levels))


@dataclass(frozen=True)
class CostModel:
    """Seconds per phase; analysis cost indexed by level (0 first)."""

    init_s: float = 0.02
    analysis_s: tuple = (0.33, 0.33, 0.31)
    task_creation_s: float = 2.77e-5

    def __post_init__(self):
        object.__setattr__(self, "analysis_s", tuple(float(x) for x in self.analysis_s))
        if min(self.init_s, self.task_creation_s, *self.analysis_s) < 0:
            raise ConfigError("costs must be nonnegative")

    def level_cost(self, level: int) -> float:
        try:
            return self.analysis_s[level]
        except IndexError:
            raise ConfigError(f"no analysis cost for level {level}") from None


def estimate_time_breakdown(tree: ExecutionTree, cm: CostModel, mode: str = "pyramidal") -> dict[str, float]:
    """Analysis time alone and with initialization and task-creation overheads."""
    if mode == "reference":
        analysis = tree.analyzed_count(0) * cm.level_cost(0)
        overhead = cm.init_s if tree.total else 0.0
    elif mode == "pyramidal":
        counts = tree.counts()
        analysis = math.fsum(c * cm.level_cost(n) for n, c in counts.items() if c)
        overhead = (cm.init_s + cm.task_creation_s * tree.total) if tree.total else 0.0
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return {"analysis_s": analysis, "with_overhead_s": analysis + overhead}


def estimate_time(tree: ExecutionTree, cm: CostModel, mode: str = "pyramidal") -> float:
    """Post-mortem wall time; init and task creation are left out."""
    return estimate_time_breakdown(tree, cm, mode)["analysis_s"]


def projection_grid(tree: ExecutionTree) -> np.ndarray:
    """Level-0 grid where every tile carries the probability of the leaf covering it."""
    g = tree.geometry
    out = np.full(g.grid_shape(0), np.nan)
    covered = np.zeros(g.grid_shape(0), dtype=bool)
    for n in range(g.top, -1, -1):
        d = tree.decisions(n)
        leaf = (d == Decision.STOP) | (d == Decision.POS)
        if not leaf.any():
            continue
        leaf0 = g.expand_to_level0(leaf, n)
        if np.any(leaf0 & covered):
            raise IntegrityError("leaves overlap at level 0")
        out[leaf0] = g.expand_to_level0(tree.probabilities(n), n)[leaf0]
        covered |= leaf0
    return out


def project_probabilities(tree: ExecutionTree) -> dict[TileId, float]:
    grid = projection_grid(tree)
    rows, cols = np.nonzero(~np.isnan(grid))
    return {TileId(0, c, r): float(grid[r, c]) for r, c in zip(rows.tolist(), cols.tolist())}


@dataclass
class RunMetrics:
    tiles_analyzed_total: int
    tiles_analyzed_per_level: dict
    tiles_reference: int
    speedup: float | None
    positive_retention_rate: float | None
    estimated_time_s: float
    reference_time_s: float
    estimated_time_with_overhead_s: float = 0.0
    reference_time_with_overhead_s: float = 0.0
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tiles_analyzed_per_level"] = {str(k): v for k, v in self.tiles_analyzed_per_level.items()}
        if self.positive_retention_rate is None:
            d["positive_retention_rate"] = "undefined"
        if self.speedup is None:
            d["speedup"] = "undefined"
        return d


def compute_metrics(pyr: ExecutionTree, ref: ExecutionTree, gt: GroundTruthPyramid,
                    cm: CostModel | None = None) -> RunMetrics:
    cm = cm or CostModel()
    notes = []
    try:
        retention = positive_retention(pyr, ref, gt)
    except UndefinedMetricError as e:
        retention = None
        notes.append(f"positive_retention_rate: {e}")
    total = pyr.total
    n_ref = ref.analyzed_count(0)
    speedup = n_ref / total if total and n_ref else None
    pt = estimate_time_breakdown(pyr, cm, "pyramidal")
    rt = estimate_time_breakdown(ref, cm, "reference")
    return RunMetrics(
        tiles_analyzed_total=total,
        tiles_analyzed_per_level=pyr.counts(),
        tiles_reference=n_ref,
        speedup=speedup,
        positive_retention_rate=retention,
        estimated_time_s=pt["analysis_s"],
        reference_time_s=rt["analysis_s"],
        estimated_time_with_overhead_s=pt["with_overhead_s"],
        reference_time_with_overhead_s=rt["with_overhead_s"],
        notes=notes,
    )


def analyze(gt: GroundTruthPyramid, src: PredictionSource, sched: ThresholdSchedule,
            cm: CostModel | None = None) -> tuple[ExecutionTree, ExecutionTree, RunMetrics]:
    pyr = run_pyramidal(gt, src, sched)
    ref = run_reference(gt, src, sched.positive_threshold_l0)
    return pyr, ref, compute_metrics(pyr, ref, gt, cm)
