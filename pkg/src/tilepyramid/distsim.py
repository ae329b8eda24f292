"""Lock-step simulation of a distributed pyramidal execution.

Each round, every worker holding work analyzes one tile and appends the
children of a zoom-in to the tail of its own queue. The load metric is the
number of tiles the busiest worker analyzed.
"""

from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .engine import Decision, ExecutionTree, ThresholdSchedule
from .errors import ConfigError, MissingPredictionError
from .predictions import PredictionSource
from .pyramid import GroundTruthPyramid, TileId, tile_order


class Distribution(str, Enum):
    ROUND_ROBIN = "round_robin"
    RANDOM = "random"
    BLOCK = "block"


class Policy(str, Enum):
    NO_REBALANCE = "none"
    LEVEL_SYNC = "level_sync"
    WORK_STEALING = "work_stealing"


@dataclass(frozen=True)
class SimConfig:
    num_workers: int
    distribution: Distribution = Distribution.ROUND_ROBIN
    policy: Policy = Policy.NO_REBALANCE
    seed: int | None = None
    unit_costs: Mapping[int, int] | None = None  # rounds per tile, by level; default 1

    def __post_init__(self):
        object.__setattr__(self, "distribution", Distribution(self.distribution))
        object.__setattr__(self, "policy", Policy(self.policy))
        if self.num_workers < 1:
            raise ConfigError("need at least one worker")
        needs_seed = self.distribution is Distribution.RANDOM or self.policy is Policy.WORK_STEALING
        if needs_seed and self.seed is None:
            raise ConfigError(f"{self.distribution.value}/{self.policy.value} needs a seed")
        for level, c in (self.unit_costs or {}).items():
            if int(c) != c or c < 1:
                raise ConfigError(f"tile cost at level {level} must be a positive integer")

    def cost(self, level: int) -> int:
        return int(self.unit_costs.get(level, 1)) if self.unit_costs else 1


@dataclass
class SimReport:
    per_worker: list
    max_load: int
    total_tiles: int
    steals_attempted: int = 0
    steals_successful: int = 0
    makespan_steps: int = 0
    per_worker_cost: list = field(default_factory=list)

    @property
    def steals_failed(self) -> int:
        return self.steals_attempted - self.steals_successful

    def to_dict(self) -> dict:
        return asdict(self)


def _blocks(items: list, w: int) -> list[list]:
    base, extra = divmod(len(items), w)
    out, start = [], 0
    for i in range(w):
        size = base + (1 if i < extra else 0)
        out.append(items[start : start + size])
        start += size
    return out


def distribute(roots: Sequence[TileId], num_workers: int, distribution: Distribution | str,
               seed: int | None = None) -> list[list[TileId]]:
    """Initial queues for `num_workers` workers from the top-level tiles."""
    if num_workers < 1:
        raise ConfigError("need at least one worker")
    distribution = Distribution(distribution)
    roots = list(roots)
    if distribution is Distribution.ROUND_ROBIN:
        return [roots[i::num_workers] for i in range(num_workers)]
    if distribution is Distribution.RANDOM:
        if seed is None:
            raise ConfigError("random distribution needs a seed")
        random.Random(seed).shuffle(roots)
        return _blocks(roots, num_workers)
    return _blocks(sorted(roots, key=tile_order), num_workers)


def oracle_max_load(tree: ExecutionTree, num_workers: int) -> int:
    """Busiest-worker load of a perfectly balanced assignment known in advance."""
    if num_workers < 1:
        raise ConfigError("need at least one worker")
    return math.ceil(tree.total / num_workers)


def simulate(gt: GroundTruthPyramid, src: PredictionSource, sched: ThresholdSchedule,
             cfg: SimConfig) -> tuple[ExecutionTree, SimReport]:
    g = gt.geometry
    sched.require(g)
    w_count = cfg.num_workers
    probs = [src.level_array(n) for n in range(g.num_levels)]
    tree = ExecutionTree(g)
    queues = [deque(q) for q in distribute(gt.roots(), w_count, cfg.distribution, cfg.seed)]
    loads = [0] * w_count
    costs = [0] * w_count
    remaining = [0] * w_count  # rounds left on the tile in hand
    in_hand: list[list[TileId]] = [[] for _ in range(w_count)]  # children released on completion
    staged: list[TileId] = []  # level-sync: next level, held back until the barrier
    rng = random.Random(cfg.seed)
    others = [[v for v in range(w_count) if v != w] for w in range(w_count)]
    report = SimReport(per_worker=loads, max_load=0, total_tiles=0, per_worker_cost=costs)
    stealing = cfg.policy is Policy.WORK_STEALING
    sync = cfg.policy is Policy.LEVEL_SYNC

    def analyze(t: TileId) -> list[TileId]:
        p = probs[t.level][t.row, t.col]
        if np.isnan(p):
            raise MissingPredictionError(t)
        d = sched.decide(t.level, float(p))
        tree.add(t, float(p), d)
        return g.children(t) if d is Decision.ZOOM else []

    rounds = 0
    while True:
        busy_any = any(remaining)
        if not busy_any and not any(queues):
            if sync and staged:
                staged.sort(key=tile_order)
                for i, t in enumerate(staged):
                    queues[i % w_count].append(t)
                staged = []
            else:
                break

        if stealing:
            for w in range(w_count):
                if remaining[w] or queues[w]:
                    continue
                # victim list refreshed every round; pruned within it
                candidates = list(others[w])
                while candidates:
                    v = candidates[rng.randrange(len(candidates))]
                    report.steals_attempted += 1
                    if len(queues[v]) >= 2:
                        queues[w].append(queues[v].pop())
                        report.steals_successful += 1
                        break
                    candidates.remove(v)

        rounds += 1
        for w in range(w_count):
            if not remaining[w]:
                if not queues[w]:
                    continue
                t = queues[w].popleft()
                in_hand[w] = analyze(t)
                remaining[w] = cfg.cost(t.level)
                loads[w] += 1
                costs[w] += remaining[w]
            remaining[w] -= 1
            if not remaining[w] and in_hand[w]:
                (staged if sync else queues[w]).extend(in_hand[w])
                in_hand[w] = []

    report.total_tiles = sum(loads)
    report.max_load = max(loads)
    report.makespan_steps = rounds
    return tree, report


SWEEP_COLUMNS = ["image", "workers", "distribution", "policy", "max_load", "total", "steals_ok", "steals_failed"]


def sweep_row(image: str, cfg: SimConfig, report: SimReport) -> dict:
    return {
        "image": image,
        "workers": cfg.num_workers,
        "distribution": cfg.distribution.value,
        "policy": cfg.policy.value,
        "max_load": report.max_load,
        "total": report.total_tiles,
        "steals_ok": report.steals_successful,
        "steals_failed": report.steals_failed,
    }


def sweep(images, sched: ThresholdSchedule, workers=(1, 2, 4, 8, 12, 16),
          distributions=tuple(Distribution), policies=tuple(Policy), seed: int = 0) -> list[dict]:
    """Corpus sweep over worker counts, distributions and policies.

    `images` is a sequence of (name, gt, src).
    """
    rows = []
    for name, gt, src in images:
        for w in workers:
            for dist in distributions:
                for pol in policies:
                    cfg = SimConfig(w, dist, pol, seed=seed)
                    _, rep = simulate(gt, src, sched, cfg)
                    rows.append(sweep_row(name, cfg, rep))
    return rows
