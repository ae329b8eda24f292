import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilepyramid.engine import ThresholdSchedule
from tilepyramid.errors import ConfigError, DataError, UndefinedMetricError, UnreachableObjectiveError
from tilepyramid.predictions import NoisyOracle, PredictionTable
from tilepyramid.pyramid import TileId
from tilepyramid.synth import SynthConfig, synth_pyramid
from tilepyramid.tuner import (
    DEFAULT_GRID,
    ConfusionCounts,
    best_threshold,
    best_threshold_for_level,
    f_beta,
    f_beta_curve,
    isolated_level_retention,
    isolated_table,
    tune_empirical,
    tune_metric_based,
    tune_metric_based_detailed,
)

from .conftest import make_gt


def f_beta_pr(tp, fp, fn, beta):
    """Precision/recall form, evaluated independently of the count form."""
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    b2 = beta**2
    return (1 + b2) * precision * recall / (b2 * precision + recall)


def scan(probs, labels, beta, grid):
    """Exhaustive grid scan; later thresholds win ties."""
    best_t, best_f = None, -1.0
    for t in grid:
        tp = sum(1 for p, y in zip(probs, labels) if p >= t and y)
        fp = sum(1 for p, y in zip(probs, labels) if p >= t and not y)
        fn = sum(1 for p, y in zip(probs, labels) if p < t and y)
        f = f_beta_pr(tp, fp, fn, beta)
        if f >= best_f:
            best_t, best_f = float(t), f
    return best_t, best_f


# -- F-beta
def test_f_beta_hand_example():
    assert f_beta(ConfusionCounts(tp=3, fp=1, fn=1), 1) == 0.75


def test_f_beta_zero_tp():
    assert f_beta(ConfusionCounts(0, 5, 5), 2.0) == 0.0
    assert f_beta(ConfusionCounts(0, 0, 0), 2.0) == 0.0


@given(st.integers(1, 500), st.floats(0.1, 20))
def test_f_beta_fixed_point(n, beta):
    # precision == recall == n / (n + 7)
    assert f_beta(ConfusionCounts(n, 7, 7), beta) == pytest.approx(n / (n + 7), abs=1e-12)


@given(tp=st.integers(0, 10_000), fp=st.integers(0, 10_000), fn=st.integers(0, 10_000), beta=st.floats(0.05, 50))
def test_f_beta_matches_pr_form(tp, fp, fn, beta):
    assert f_beta(ConfusionCounts(tp, fp, fn), beta) == pytest.approx(f_beta_pr(tp, fp, fn, beta), abs=1e-12)


def test_f_beta_rejects_nonpositive_beta():
    with pytest.raises(ConfigError):
        f_beta(ConfusionCounts(1, 1, 1), 0)


def test_confusion_from_predictions_inclusive():
    c = ConfusionCounts.from_predictions([0.5, 0.4, 0.5, 0.9], [True, True, False, False], 0.5)
    assert (c.tp, c.fp, c.fn, c.tn) == (1, 2, 1, 0)


# -- best_threshold
def test_best_threshold_separable():
    probs = [0.9] * 4 + [0.1] * 6
    labels = [True] * 4 + [False] * 6
    assert best_threshold(probs, labels, 2.0, [0.0, 0.5, 1.0]) == (0.5, 1.0)


def test_best_threshold_all_negative_prefers_one():
    assert best_threshold([0.2, 0.8], [False, False], 3.0) == (1.0, 0.0)


def test_best_threshold_ties_go_high():
    # every t in (0.1, 0.9] separates perfectly
    t, f = best_threshold([0.9, 0.1], [True, False], 1.0)
    assert (t, f) == (0.9, 1.0)


@given(st.data())
@settings(max_examples=80, deadline=None)
def test_best_threshold_matches_scan(data):
    n = data.draw(st.integers(1, 50))
    probs = data.draw(st.lists(st.floats(0, 1), min_size=n, max_size=n))
    labels = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
    beta = data.draw(st.sampled_from([0.5, 1, 2, 7, 14]))
    grid = np.linspace(0, 1, 101).round(2)
    t, f = best_threshold(probs, labels, beta, grid)
    bt, bf = scan(probs, labels, beta, grid)
    assert t == bt
    assert f == pytest.approx(bf, abs=1e-12)


def test_curve_matches_counts():
    rng = np.random.default_rng(1)
    p, y = rng.random(200), rng.random(200) < 0.3
    curve = f_beta_curve(p, y, 3.0, DEFAULT_GRID)
    for i in range(0, 1001, 37):
        c = ConfusionCounts.from_predictions(p, y, DEFAULT_GRID[i])
        assert curve[i] == pytest.approx(f_beta(c, 3.0), abs=1e-12)


def test_large_beta_reaches_full_recall():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p, y = rng.random(50), rng.random(50) < 0.4
        if not y.any():
            continue
        t, _ = best_threshold(p, y, 1000.0)
        assert ConfusionCounts.from_predictions(p, y, t).fn == 0


def test_unsorted_grid_rejected():
    with pytest.raises(ConfigError):
        best_threshold([0.5], [True], 1.0, [0.5, 0.2])


def test_level_absent_from_table(small_slide):
    gt, src = small_slide
    table = PredictionTable({t: e for t, e in PredictionTable.from_source(gt, src).items() if t.level != 1})
    with pytest.raises(DataError):
        best_threshold_for_level(table, 1, 2.0)
    t, _ = best_threshold_for_level(table, 2, 2.0)
    assert t in DEFAULT_GRID


# -- isolated retention
def brute_isolated(gt, src, level, threshold, pt=0.5):
    """Walk every level-0 tile, keep it if its level-`level` ancestor passes the threshold."""
    g = gt.geometry
    ref_tp, kept, analyzed = 0, 0, 0
    for n in range(g.top, -1, -1):
        for t in g.tiles(n):
            root = g.ancestor(t, g.top)
            if not gt.foreground[root.row, root.col]:
                continue
            passes = True
            if n < level:
                a = g.ancestor(t, level)
                passes = src.predict(a) >= threshold
            analyzed += passes
            if n == 0 and src.predict(t) >= pt and gt.label(t):
                ref_tp += 1
                kept += passes
    n_ref = sum(1 for t in g.tiles(0) if gt.foreground[g.ancestor(t, g.top).row, g.ancestor(t, g.top).col])
    return kept / ref_tp, n_ref / analyzed


@pytest.mark.parametrize("level", [1, 2])
@pytest.mark.parametrize("threshold", [0.3, 0.5, 0.8])
def test_isolated_matches_brute_force(level, threshold):
    gt, src = synth_pyramid(SynthConfig(cols=20, rows=24, regions=1, region_radius=5.0, seed=8))
    r, x = isolated_level_retention(gt, src, level, threshold)
    br, bx = brute_isolated(gt, src, level, threshold)
    assert r == pytest.approx(br, abs=1e-12)
    assert x == pytest.approx(bx, abs=1e-12)


def test_isolated_trivial_thresholds(small_slide):
    gt, src = small_slide
    assert isolated_level_retention(gt, src, 1, 0.0)[0] == 1.0
    assert isolated_level_retention(gt, src, 2, 1.0)[0] == 0.0


def test_isolated_level_range(small_slide):
    gt, src = small_slide
    with pytest.raises(ConfigError):
        isolated_level_retention(gt, src, 0, 0.5)
    with pytest.raises(ConfigError):
        isolated_level_retention(gt, src, 3, 0.5)


def test_isolated_undefined_on_negative_image():
    gt, src = synth_pyramid(SynthConfig(cols=16, rows=16, regions=0, seed=2))
    with pytest.raises(UndefinedMetricError):
        isolated_level_retention(gt, src, 1, 0.5)


# -- metric-based strategy
def _clean_train():
    cfgs = [SynthConfig(cols=32, rows=32, regions=2, region_radius=4.0, seed=s, spread=(0.05, 0.05, 0.05))
            for s in (1, 2, 3)]
    return [synth_pyramid(c) for c in cfgs]


def test_metric_objective_root():
    res = tune_metric_based_detailed(_clean_train(), 0.9)
    assert res.per_level_objective == pytest.approx(math.sqrt(0.9), abs=1e-15)
    assert round(res.per_level_objective, 4) == 0.9487
    for level, row in res.chosen.items():
        assert row.retention >= res.per_level_objective


def test_metric_r_one_keeps_everything():
    train = _clean_train()
    res = tune_metric_based_detailed(train, 1.0)
    assert res.per_level_objective == 1.0
    sched = res.schedule
    for gt, src in train:
        for level in (1, 2):
            assert isolated_level_retention(gt, src, level, sched.thresholds[level])[0] == 1.0


def test_metric_picks_smallest_beta():
    train = _clean_train()
    res = tune_metric_based_detailed(train, 0.9)
    rows = isolated_table(train)
    for level, row in res.chosen.items():
        earlier = [r for r in rows if r.level == level and r.beta < row.beta]
        assert all(r.retention < res.per_level_objective for r in earlier)


def test_metric_unreachable_names_level(small_slide):
    with pytest.raises(UnreachableObjectiveError) as e:
        tune_metric_based([small_slide], 1.0, betas=(1,), grid=[1.0])
    assert e.value.level == 2


@pytest.mark.parametrize("r", [0.0, 1.5])
def test_metric_objective_range(small_slide, r):
    with pytest.raises(ConfigError):
        tune_metric_based([small_slide], r)


# -- empirical strategy
def brute_pyramidal(gt, src, thresholds, pt=0.5):
    """Recursive descent from every foreground root; returns (analyzed count, retained level-0 set)."""
    g = gt.geometry
    count, retained = 0, set()

    def visit(t):
        nonlocal count
        count += 1
        p = src.predict(t)
        if t.level == 0:
            if p >= pt:
                retained.add(t)
            return
        if p >= thresholds[t.level]:
            for c in g.children(t):
                visit(c)

    for r in range(g.grid_shape(g.top)[0]):
        for c in range(g.grid_shape(g.top)[1]):
            if gt.foreground[r, c]:
                visit(TileId(g.top, c, r))
    return count, retained


def test_empirical_toy_matches_hand_runs():
    toy = [synth_pyramid(SynthConfig(cols=12, rows=8, regions=1, region_radius=2.5, seed=s)) for s in (5, 6)]
    grid = np.linspace(0, 1, 51).round(2)
    rows = tune_empirical(toy, betas=(1, 2, 3), grid=grid)
    assert [r.beta for r in rows] == [1, 2, 3]
    for row in rows:
        thresholds = {}
        for level in (2, 1):
            probs, labels = [], []
            for gt, src in toy:
                for t in gt.geometry.tiles(level):
                    if gt.reachable(level)[t.row, t.col]:
                        probs.append(src.predict(t))
                        labels.append(gt.label(t))
            thresholds[level] = scan(probs, labels, row.beta, grid)[0]
        assert row.thresholds == thresholds
        rets, reds = [], []
        for gt, src in toy:
            _, ref_pos = brute_pyramidal(gt, src, {1: 0.0, 2: 0.0})
            count, kept = brute_pyramidal(gt, src, thresholds)
            ref_count = len([t for t in gt.geometry.tiles(0) if gt.reachable(0)[t.row, t.col]])
            tp = {t for t in ref_pos if gt.label(t)}
            if tp:
                rets.append(len(tp & kept) / len(tp))
            reds.append(ref_count / count)
        assert row.retention == pytest.approx(np.mean(rets), abs=1e-12)
        assert row.tile_reduction == pytest.approx(np.mean(reds), abs=1e-12)


def test_empirical_degenerate_zero_thresholds():
    # every tile positive with probability 1: all thresholds collapse to pass-through
    gt = make_gt(np.ones((16, 16), dtype=bool))
    src = NoisyOracle(gt, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), seed=0)
    rows = tune_empirical([(gt, src)], betas=(1, 2), grid=[0.0])
    for row in rows:
        assert row.thresholds == {1: 0.0, 2: 0.0}
        assert row.retention == 1.0
        assert row.tile_reduction == pytest.approx(1 / 1.3125, abs=1e-12)


def test_empirical_rejects_empty():
    with pytest.raises(ConfigError):
        tune_empirical([], betas=(1,))
    with pytest.raises(ConfigError):
        tune_empirical([synth_pyramid(SynthConfig(cols=8, rows=8, seed=1))], betas=())


def test_empirical_order_independent(corpus):
    train = [(im.gt, im.src) for im in corpus[:4]]
    a = tune_empirical(train, betas=(3, 1, 2))
    b = tune_empirical(train[::-1], betas=(1, 2, 3))
    assert [r.beta for r in a] == [1, 2, 3]
    for x, y in zip(a, b):
        assert x.thresholds == y.thresholds
        assert x.retention == pytest.approx(y.retention, abs=1e-12)


def test_schedule_from_tuning_is_usable(small_slide):
    sched = tune_metric_based([small_slide], 0.8)
    assert isinstance(sched, ThresholdSchedule)
    assert set(sched.thresholds) == {1, 2}
