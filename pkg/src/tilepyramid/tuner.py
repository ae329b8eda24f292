"""F-beta scoring and the two per-level threshold selection strategies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .engine import ThresholdSchedule, positive_retention, run_pyramidal, run_reference, true_positive_reference
from .errors import ConfigError, DataError, UndefinedMetricError, UnreachableObjectiveError
from .predictions import PredictionSource, PredictionTable
from .pyramid import GroundTruthPyramid

DEFAULT_GRID = np.linspace(0.0, 1.0, 1001).round(3)
DEFAULT_BETAS = tuple(range(1, 15))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise DataError("confusion counts must be nonnegative")

    @classmethod
    def from_predictions(cls, probs, labels, threshold: float) -> "ConfusionCounts":
        probs = np.asarray(probs)
        labels = np.asarray(labels, dtype=bool)
        hit = probs >= threshold
        return cls(
            tp=int(np.sum(hit & labels)),
            fp=int(np.sum(hit & ~labels)),
            fn=int(np.sum(~hit & labels)),
            tn=int(np.sum(~hit & ~labels)),
        )


def f_beta(c: ConfusionCounts, beta: float) -> float:
    if beta <= 0:
        raise ConfigError("beta must be positive")
    b2 = beta * beta
    num = (1 + b2) * c.tp
    den = (1 + b2) * c.tp + b2 * c.fn + c.fp
    return num / den if den else 0.0


def _as_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size == 0:
        raise ConfigError("threshold grid must be a nonempty 1-d sequence")
    if np.any(np.diff(g) < 0):
        raise ConfigError("threshold grid must be sorted")
    return g


def f_beta_curve(probs, labels, beta: float, grid=DEFAULT_GRID) -> np.ndarray:
    """F-beta of the classifier ``p >= t`` for every t in `grid`."""
    if beta <= 0:
        raise ConfigError("beta must be positive")
    g = _as_grid(grid)
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    pos = np.sort(probs[labels])
    neg = np.sort(probs[~labels])
    tp = len(pos) - np.searchsorted(pos, g, side="left")
    fp = len(neg) - np.searchsorted(neg, g, side="left")
    fn = len(pos) - tp
    b2 = beta * beta
    num = (1 + b2) * tp
    den = (1 + b2) * tp + b2 * fn + fp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1), 0.0)


def best_threshold(probs, labels, beta: float, grid=DEFAULT_GRID) -> tuple[float, float]:
    """Grid threshold maximizing F-beta; ties go to the largest threshold."""
    g = _as_grid(grid)
    f = f_beta_curve(probs, labels, beta, g)
    i = len(f) - 1 - int(np.argmax(f[::-1]))
    return float(g[i]), float(f[i])


def best_threshold_for_level(table: PredictionTable, level: int, beta: float, grid=DEFAULT_GRID) -> tuple[float, float]:
    probs, labels = table.level_view(level)
    return best_threshold(probs, labels, beta, grid)


class _Image:
    """One training image with its reference execution cached."""

    def __init__(self, gt: GroundTruthPyramid, src: PredictionSource, positive_threshold_l0: float):
        self.gt, self.src = gt, src
        self.ref = run_reference(gt, src, positive_threshold_l0)
        self.n_ref = self.ref.analyzed_count(0)
        self.has_tp = bool(true_positive_reference(self.ref, gt).any())

    def level_data(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        mask = self.gt.reachable(level)
        return self.src.level_array(level)[mask], self.gt.labels(level)[mask]

    def run(self, sched: ThresholdSchedule) -> tuple[float | None, float | None]:
        pyr = run_pyramidal(self.gt, self.src, sched)
        retention = positive_retention(pyr, self.ref, self.gt) if self.has_tp else None
        reduction = self.n_ref / pyr.total if pyr.total else None
        return retention, reduction


def _prepare(train, positive_threshold_l0: float) -> list[_Image]:
    images = [_Image(gt, src, positive_threshold_l0) for gt, src in train]
    if not images:
        raise ConfigError("training set is empty")
    g = images[0].gt.geometry
    for im in images[1:]:
        if (im.gt.geometry.num_levels, im.gt.geometry.scale_factor) != (g.num_levels, g.scale_factor):
            raise ConfigError("training images must share levels and scale factor")
    return images


def _pooled(images: list[_Image], level: int) -> tuple[np.ndarray, np.ndarray]:
    parts = [im.level_data(level) for im in images]
    return np.concatenate([p for p, _ in parts]), np.concatenate([y for _, y in parts])


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def isolated_level_retention(gt: GroundTruthPyramid, src: PredictionSource, level: int, threshold: float,
                             positive_threshold_l0: float = 0.5) -> tuple[float, float]:
    """Retention and tile reduction with only `level` filtering; every other level zooms everywhere."""
    top = gt.geometry.top
    if not 1 <= level <= top:
        raise ConfigError(f"level must be in 1..{top}")
    sched = ThresholdSchedule.pass_through(top, positive_threshold_l0).with_level(level, threshold)
    im = _Image(gt, src, positive_threshold_l0)
    if not im.has_tp:
        raise UndefinedMetricError("reference detects no true positive tile")
    retention, reduction = im.run(sched)
    return retention, reduction


@dataclass(frozen=True)
class IsolatedRow:
    level: int
    beta: float
    threshold: float
    retention: float | None
    tile_reduction: float | None


def isolated_table(train: Sequence[tuple[GroundTruthPyramid, PredictionSource]], betas=DEFAULT_BETAS,
                   grid=DEFAULT_GRID, positive_threshold_l0: float = 0.5) -> list[IsolatedRow]:
    """Per-level, per-beta isolated retention and tile reduction averaged over images."""
    images = _prepare(train, positive_threshold_l0)
    top = images[0].gt.geometry.top
    rows = []
    for level in range(top, 0, -1):
        probs, labels = _pooled(images, level)
        for beta in sorted(betas):
            t, _ = best_threshold(probs, labels, beta, grid)
            sched = ThresholdSchedule.pass_through(top, positive_threshold_l0).with_level(level, t)
            results = [im.run(sched) for im in images]
            rows.append(IsolatedRow(level, beta, t, _mean(r for r, _ in results), _mean(x for _, x in results)))
    return rows


@dataclass(frozen=True)
class MetricBasedResult:
    schedule: ThresholdSchedule
    objective: float
    per_level_objective: float
    chosen: dict  # level -> IsolatedRow


def tune_metric_based_detailed(train, objective_r: float, betas=DEFAULT_BETAS, grid=DEFAULT_GRID,
                               positive_threshold_l0: float = 0.5) -> MetricBasedResult:
    if not 0.0 < objective_r <= 1.0:
        raise ConfigError("objective retention must be in (0, 1]")
    rows = isolated_table(train, betas, grid, positive_threshold_l0)
    top = max(r.level for r in rows)
    per_level = objective_r ** (1.0 / top)
    chosen = {}
    for level in range(top, 0, -1):
        for row in (r for r in rows if r.level == level):  # beta ascending
            if row.retention is not None and row.retention >= per_level:
                chosen[level] = row
                break
        else:
            raise UnreachableObjectiveError(level, per_level)
    sched = ThresholdSchedule({n: r.threshold for n, r in chosen.items()}, positive_threshold_l0)
    return MetricBasedResult(sched, objective_r, per_level, chosen)


def tune_metric_based(train, objective_r: float, betas=DEFAULT_BETAS, grid=DEFAULT_GRID,
                      positive_threshold_l0: float = 0.5) -> ThresholdSchedule:
    """Per level, the smallest beta whose isolated retention reaches the n-th root of `objective_r`."""
    return tune_metric_based_detailed(train, objective_r, betas, grid, positive_threshold_l0).schedule


@dataclass(frozen=True)
class BetaSweepRow:
    beta: float
    thresholds: dict  # level -> threshold
    retention: float | None
    tile_reduction: float | None


def tune_empirical(train, betas=DEFAULT_BETAS, grid=DEFAULT_GRID,
                   positive_threshold_l0: float = 0.5) -> list[BetaSweepRow]:
    """Full pyramidal runs with the same beta at every level, one row per beta."""
    betas = sorted(betas)
    if not betas:
        raise ConfigError("beta range is empty")
    images = _prepare(train, positive_threshold_l0)
    top = images[0].gt.geometry.top
    pooled = {n: _pooled(images, n) for n in range(1, top + 1)}
    out = []
    for beta in betas:
        thresholds = {n: best_threshold(*pooled[n], beta, grid)[0] for n in range(top, 0, -1)}
        sched = ThresholdSchedule(thresholds, positive_threshold_l0)
        results = [im.run(sched) for im in images]
        out.append(BetaSweepRow(beta, thresholds, _mean(r for r, _ in results), _mean(x for _, x in results)))
    return out
