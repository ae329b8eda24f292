"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line in ``conftest.ACCEPTANCE``; the lines are
printed at the end of the pytest run.
"""

import functools
import math
import random
import time

import numpy as np
import pytest

from tilepyramid import io as fio
from tilepyramid.cluster import run_local_cluster
from tilepyramid.cluster.wire import (
    Empty,
    FrameDecoder,
    Hello,
    Shutdown,
    StealRequest,
    SubtreeUpload,
    TaskGrant,
    decode,
    encode,
)
from tilepyramid.distsim import Distribution, Policy, SimConfig, oracle_max_load, simulate
from tilepyramid.engine import (
    CostModel,
    ThresholdSchedule,
    estimate_time,
    positive_retention,
    run_pyramidal,
    run_reference,
    slowdown_bound,
)
from tilepyramid.predictions import NoisyOracle
from tilepyramid.pyramid import TileId
from tilepyramid.synth import SynthConfig, cluster_images, synth_pyramid
from tilepyramid.tuner import (
    DEFAULT_BETAS,
    DEFAULT_GRID,
    ConfusionCounts,
    best_threshold,
    f_beta,
    tune_empirical,
    tune_metric_based_detailed,
)

from . import conftest
from .conftest import make_gt

SCHED = ThresholdSchedule.uniform(2, 0.5)


def criterion(name, limit_s=None):
    """Record the outcome of an acceptance test, with its runtime against `limit_s`."""

    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            start = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or "ok"
                elapsed = time.perf_counter() - start
                if limit_s is not None:
                    assert elapsed < limit_s, f"took {elapsed:.2f}s, limit {limit_s}s"
            except BaseException as e:
                conftest.ACCEPTANCE[name] = (False, f"{type(e).__name__}: {e}".splitlines()[0])
                raise
            conftest.ACCEPTANCE[name] = (True, f"{detail} ({elapsed:.2f}s)")

        return inner

    return wrap


@pytest.fixture(scope="module")
def split(corpus):
    return corpus[0::2], corpus[1::2]


def exact(gt):
    return NoisyOracle(gt, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), seed=0)


@criterion("1 slowdown bound", limit_s=1.0)
def test_1_slowdown_bound():
    assert abs(slowdown_bound(2) - 4 / 3) <= 1e-12
    assert abs(slowdown_bound(3) - 9 / 8) <= 1e-12
    assert slowdown_bound(2, 3) == 1.3125
    gt = make_gt(np.zeros((16, 16)))
    src = exact(gt)
    ratio = run_pyramidal(gt, src, ThresholdSchedule.pass_through(2)).total / run_reference(gt, src).total
    assert abs(ratio - 1.3125) <= 1e-9
    return f"S(2)={slowdown_bound(2):.15f} S(3)={slowdown_bound(3):.15f} 16x16 ratio={ratio}"


def _pr_form(c, beta):
    precision = c.tp / (c.tp + c.fp)
    recall = c.tp / (c.tp + c.fn)
    return (1 + beta**2) * precision * recall / (beta**2 * precision + recall)


@criterion("2 F-beta oracle", limit_s=10.0)
def test_2_f_beta_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        tp, fp, fn = (int(x) for x in rng.integers([1, 0, 0], 10_000, size=3))
        beta = float(rng.uniform(0.1, 20))
        c = ConfusionCounts(tp, fp, fn)
        worst = max(worst, abs(f_beta(c, beta) - _pr_form(c, beta)))
    assert worst <= 1e-12
    for _ in range(200):
        p = rng.random(50).round(int(rng.integers(1, 4)))  # coarse values create ties
        y = rng.random(50) < rng.uniform(0.1, 0.6)
        beta = float(rng.integers(1, 15))
        t, f = best_threshold(p, y, beta)
        scores = []
        for g in DEFAULT_GRID:
            c = ConfusionCounts.from_predictions(p, y, g)
            scores.append(_pr_form(c, beta) if c.tp else 0.0)
        scores = np.array(scores)
        best = scores.max()
        assert abs(f - best) <= 1e-12
        assert t == DEFAULT_GRID[np.flatnonzero(scores >= best - 1e-12).max()]
    return f"max |count form - PR form| = {worst:.1e}; 200 tables match the exhaustive scan"


def _analyzed(tree):
    return np.concatenate([tree.analyzed(n).ravel() for n in range(3)])


@criterion("3 retention/speedup consistency", limit_s=60.0)
def test_3_consistency(corpus):
    for im in corpus:
        pyr = run_pyramidal(im.gt, im.src, ThresholdSchedule.pass_through(2))
        ref = run_reference(im.gt, im.src)
        assert np.array_equal(pyr.detected_positive(), ref.detected_positive()), im.name
        if (ref.detected_positive() & im.gt.labels(0)).any():
            assert positive_retention(pyr, ref, im.gt) == 1.0
    # analyzed sets only change where a threshold crosses a probability, so stepping
    # through every distinct probability of one level covers all thresholds exactly
    checks = 0
    for seed in (1, 2, 3):
        gt, src = synth_pyramid(SynthConfig(cols=32, rows=32, regions=2, region_radius=4.0, seed=seed,
                                            spread=(0.4, 0.4, 0.4)))
        cuts = {n: np.unique(np.r_[0.0, src.level_array(n)[gt.reachable(n)], 1.0]) for n in (1, 2)}
        sets = {}
        for a in cuts[2]:
            for b in cuts[1]:
                sets[a, b] = _analyzed(run_pyramidal(gt, src, ThresholdSchedule({2: float(a), 1: float(b)})))
        for i, a in enumerate(cuts[2]):
            for j, b in enumerate(cuts[1]):
                here = sets[a, b]
                if i + 1 < len(cuts[2]):
                    assert not np.any(sets[cuts[2][i + 1], b] & ~here)
                    checks += 1
                if j + 1 < len(cuts[1]):
                    assert not np.any(sets[a, cuts[1][j + 1]] & ~here)
                    checks += 1
    return f"{len(corpus)} images pass-through identical; {checks} threshold raises never grew the tree"


@criterion("4 metric-based strategy", limit_s=300.0)
def test_4_metric_based(split):
    train, test = split
    res = tune_metric_based_detailed([(im.gt, im.src) for im in train], 0.90)
    assert abs(res.per_level_objective - math.sqrt(0.9)) <= 1e-15
    for level, row in res.chosen.items():
        assert row.retention >= res.per_level_objective
        assert row.retention >= 0.9487
    train_ret = []
    for im in train:
        ref = run_reference(im.gt, im.src)
        if (ref.detected_positive() & im.gt.labels(0)).any():
            train_ret.append(positive_retention(run_pyramidal(im.gt, im.src, res.schedule), ref, im.gt))
    test_ret = []
    for im in test:
        ref = run_reference(im.gt, im.src)
        if (ref.detected_positive() & im.gt.labels(0)).any():
            test_ret.append(positive_retention(run_pyramidal(im.gt, im.src, res.schedule), ref, im.gt))
    # 0.85 leaves room for seed variance of the noisy classifier on small images
    assert test_ret and min(test_ret) >= 0.85
    chosen = ", ".join(f"L{n}: beta={r.beta} t={r.threshold} iso={r.retention:.4f}"
                       for n, r in sorted(res.chosen.items(), reverse=True))
    return (f"{chosen}; train full-run retention {np.mean(train_ret):.4f}; "
            f"test retention mean {np.mean(test_ret):.4f} min {min(test_ret):.4f}")


@criterion("5 empirical sweep", limit_s=300.0)
def test_5_empirical(corpus, tmp_path):
    rows = tune_empirical([(im.gt, im.src) for im in corpus], DEFAULT_BETAS)
    fio.write_beta_sweep(tmp_path / "sweep.csv", rows, 2)
    back = fio.read_beta_sweep(tmp_path / "sweep.csv")
    assert [r.beta for r in back] == list(range(1, 15))
    ret = [r.retention for r in back]
    red = [r.tile_reduction for r in back]
    exceptions = sum(a > b for a, b in zip(ret, ret[1:])) + sum(a < b for a, b in zip(red, red[1:]))
    # at most one seed exception is tolerated; the seeded corpus has none
    assert exceptions == 0
    return f"14 rows; retention {ret[0]:.4f}..{ret[-1]:.4f}, reduction {red[0]:.3f}..{red[-1]:.3f}, 0 exceptions"


@criterion("6 simulator conservation and bounds", limit_s=300.0)
def test_6_simulator(corpus):
    by_dist = {(p, d): [] for p in Policy for d in Distribution}
    worst_slack = -10**9
    for im in corpus:
        single = run_pyramidal(im.gt, im.src, SCHED)
        for w in (1, 2, 4, 8, 12, 16):
            for d in Distribution:
                for p in Policy:
                    tree, rep = simulate(im.gt, im.src, SCHED, SimConfig(w, d, p, seed=7))
                    assert sum(rep.per_worker) == single.total
                    ceil = math.ceil(single.total / w)
                    assert rep.max_load >= ceil == oracle_max_load(single, w)
                    if p is Policy.WORK_STEALING:
                        worst_slack = max(worst_slack, rep.max_load - ceil)
                        assert rep.max_load <= ceil + 3, (im.name, w, d)
                    by_dist[p, d].append(rep.max_load)
    means = {k: float(np.mean(v)) for k, v in by_dist.items()}
    for p in Policy:
        assert means[p, Distribution.BLOCK] >= means[p, Distribution.ROUND_ROBIN], p
    return (f"worst stealing slack {worst_slack}; mean max_load block/rr: "
            + ", ".join(f"{p.value} {means[p, Distribution.BLOCK]:.1f}/{means[p, Distribution.ROUND_ROBIN]:.1f}"
                        for p in Policy))


@criterion("7 cost model")
def test_7_cost_model(corpus):
    gt = make_gt(np.zeros((100, 100)))
    ref = run_reference(gt, exact(gt))
    assert ref.analyzed_count(0) == 10_000
    assert estimate_time(ref, CostModel(), "reference") == 3300.0
    cm = CostModel()
    break_even = max(cm.analysis_s) / cm.analysis_s[0]
    applicable = 0
    for im in corpus:
        ref = run_reference(im.gt, im.src)
        if not ref.total:
            continue
        for t in np.linspace(0.1, 0.9, 9):
            pyr = run_pyramidal(im.gt, im.src, ThresholdSchedule.uniform(2, float(t)))
            if ref.total / pyr.total > break_even:
                applicable += 1
                assert estimate_time(pyr, cm, "pyramidal") < estimate_time(ref, cm, "reference")
    assert applicable > 0
    return f"reference 10000 tiles = 3300.0 s; {applicable} runs above break-even {break_even:.3f} all faster"


@criterion("8 cluster equivalence")
def test_8_cluster():
    runs = []
    for im in cluster_images():
        engine = run_pyramidal(im.gt, im.src, SCHED)
        for w in (1, 2, 4):
            start = time.perf_counter()
            res = run_local_cluster(im.gt, im.src, SCHED, w, seed=w, timeout=110.0)
            elapsed = time.perf_counter() - start
            assert elapsed < 120.0
            assert res.tree == engine, (im.name, w)
            assert [t for t, _, _ in res.tree.nodes()] == [t for t, _, _ in engine.nodes()]
            assert sum(res.loads) == engine.total  # exactly once
            runs.append(elapsed)
    return f"{len(runs)} runs node-identical to the engine, slowest {max(runs):.2f}s"


def _random_message(rng):
    kind = rng.randrange(6)
    sender = rng.randrange(1 << 16)
    if kind == 0:
        return StealRequest(sender)
    if kind == 1:
        return TaskGrant(sender, TileId(rng.randrange(10), rng.randrange(1 << 20), rng.randrange(1 << 20)))
    if kind == 2:
        return Empty(sender)
    if kind == 3:
        nodes = tuple(
            (rng.randrange(10), rng.randrange(1 << 20), rng.randrange(1 << 20), rng.random(),
             rng.choice(["stop", "zoom", "pos"]))
            for _ in range(rng.randrange(6))
        )
        return SubtreeUpload(sender, nodes)
    if kind == 4:
        return Hello(sender)
    return Shutdown(sender)


@criterion("9 wire protocol")
def test_9_wire():
    rng = random.Random(9)
    msgs = [_random_message(rng) for _ in range(10_000)]
    frames = [encode(m) for m in msgs]
    for m, f in zip(msgs, frames):
        assert decode(f) == m and encode(decode(f)) == f
    stream = b"".join(frames)
    dec, out, i = FrameDecoder(), [], 0
    while i < len(stream):
        step = rng.randrange(1, 200)
        out += dec.feed(stream[i : i + step])
        i += step
    assert out == msgs and dec.pending == 0
    assert b"".join(encode(m) for m in out) == stream
    return f"10000 messages, {len(stream)} bytes round-tripped bit-exactly"
