import math

import numpy as np
import pytest

from taukit import errors
from taukit.bands import Band, BandSet, equal_width_bands
from taukit.estimators import ODDS, PREV, RATE, TauCurve, odds_curve
from taukit.inference import (BOOTSTRAP, PERMUTATION_NULL, CurveBundle, CurveFactory,
                              bootstrap_curves, clustering_range, crossing_distance,
                              global_envelope_test, legacy_range_azman, permutation_null_curves,
                              pointwise_envelope, replicate_rng)
from taukit.model import CaseDataset, RelatednessRule
from taukit.synth import EpidemicConfig, simulate_epidemic, simulate_null
from gen import random_dataset, uniform_person_time_panel

R05 = RelatednessRule.temporal(0, 5)


def running_example():
    return CaseDataset.from_arrays([0, 1, 2, 10], [0, 0, 0, 0], [0, 1, 50, 100])


def curve(values, bands=None):
    values = np.asarray(values, dtype=float)
    bands = bands or equal_width_bands(25.0 * len(values), len(values))
    return TauCurve(ODDS, bands, values, tuple(None for _ in values))


def bundle(reps, point=None, kind=BOOTSTRAP, bands=None):
    reps = np.asarray(reps, dtype=float)
    pt = curve(point if point is not None else reps[0], bands)
    return CurveBundle(pt, reps, kind, 0)


# ---------------------------------------------------------------- rng

def test_replicate_streams_are_keyed():
    a = replicate_rng(7, 3).random(4)
    assert np.array_equal(a, replicate_rng(7, 3).random(4))
    assert not np.array_equal(a, replicate_rng(7, 4).random(4))
    assert not np.array_equal(a, replicate_rng(8, 3).random(4))


# ---------------------------------------------------------------- bootstrap

def test_bootstrap_single_replicate_is_a_resample():
    ds = running_example()
    b = bootstrap_curves(ds, BandSet((Band(0, 2), Band(2, 20))), R05, R=1, seed=3)
    assert b.R == 1 and b.kind == BOOTSTRAP
    f = CurveFactory(ds, b.bands, R05)
    w = np.bincount(replicate_rng(3, 0).integers(0, 4, size=4), minlength=4)
    assert np.array_equal(b.replicates[0], f.weighted(w).values, equal_nan=True)


def test_bootstrap_same_seed_bitwise():
    ds = random_dataset(np.random.default_rng(1), n_max=40)
    bands = equal_width_bands(10, 5)
    a = bootstrap_curves(ds, bands, R05, PREV, R=40, seed=11)
    b = bootstrap_curves(ds, bands, R05, PREV, R=40, seed=11)
    assert a.replicates.tobytes() == b.replicates.tobytes()
    c = bootstrap_curves(ds, bands, R05, PREV, R=40, seed=12)
    assert c.replicates.tobytes() != a.replicates.tobytes()


@pytest.mark.parametrize("estimator", [ODDS, PREV])
def test_bootstrap_workers_bitwise(estimator):
    ds = random_dataset(np.random.default_rng(2), n_max=40)
    bands = equal_width_bands(10, 5)
    one = bootstrap_curves(ds, bands, R05, estimator, R=30, seed=5, workers=1)
    four = bootstrap_curves(ds, bands, R05, estimator, R=30, seed=5, workers=4)
    assert one.replicates.tobytes() == four.replicates.tobytes()


def test_bootstrap_rate_workers_bitwise():
    panel = uniform_person_time_panel(np.random.default_rng(3))
    bands = equal_width_bands(10, 4)
    one = bootstrap_curves(panel, bands, R05, RATE, R=20, seed=5, workers=1)
    three = bootstrap_curves(panel, bands, R05, RATE, R=20, seed=5, workers=3)
    assert one.replicates.tobytes() == three.replicates.tobytes()


def test_bootstrap_identity_weights_reproduce_point():
    ds = random_dataset(np.random.default_rng(4), n_max=30)
    bands = equal_width_bands(10, 4)
    f = CurveFactory(ds, bands, R05, PREV)
    assert np.array_equal(f.weighted(np.ones(f.n_units, dtype=int)).values, f.point().values,
                          equal_nan=True)


def test_bootstrap_duplicated_unit_forms_no_self_pair():
    # two copies of case 0 and two of case 1: the only pairs are 0-1 (x4)
    ds = running_example()
    f = CurveFactory(ds, BandSet((Band(0, 2), Band(2, 20))), R05)
    c = f.weighted(np.array([2, 2, 0, 0]))
    assert c.n_related.tolist() == [4, 0]  # self-pairs would add two more
    assert c.values[0] == 1.0 and c.reasons[1] == "GlobalOddsUndefined"


def test_bootstrap_running_example_mean():
    b = bootstrap_curves(running_example(), BandSet((Band(0, 2), Band(2, 20))), R05, R=500, seed=1)
    v = b.replicates[:, 0]
    v = v[np.isfinite(v)]
    assert len(v) > 50
    assert 5.0 / 3 <= v.mean() <= 5.0 * 3
    assert len(np.unique(v)) > 1


def test_bootstrap_rejects_bad_R():
    with pytest.raises(errors.ConfigError):
        bootstrap_curves(running_example(), equal_width_bands(10, 2), R05, R=0)


# ---------------------------------------------------------------- envelope

def test_envelope_constant():
    env = pointwise_envelope(bundle(np.full((30, 2), 2.5)))
    assert env.lo.tolist() == [2.5, 2.5] and env.hi.tolist() == [2.5, 2.5]


def test_envelope_one_to_hundred():
    env = pointwise_envelope(bundle(np.arange(1, 101, dtype=float)[:, None]), 0.95)
    assert env.lo[0] == pytest.approx(3.475)
    assert env.hi[0] == pytest.approx(97.525)


def test_envelope_too_few():
    with pytest.raises(errors.TooFewReplicates):
        pointwise_envelope(bundle(np.ones((5, 1))))


def test_envelope_level_one_spans_min_max_and_nests():
    reps = np.random.default_rng(0).gamma(2.0, 1.0, (60, 4))
    b = bundle(reps)
    full = pointwise_envelope(b, 1.0)
    assert np.array_equal(full.lo, reps.min(axis=0)) and np.array_equal(full.hi, reps.max(axis=0))
    prev = full
    for level in (0.99, 0.95, 0.8, 0.5, 0.1):
        env = pointwise_envelope(b, level)
        assert (env.lo >= prev.lo).all() and (env.hi <= prev.hi).all()
        prev = env


def test_envelope_unreliable_band_and_undefined_cells():
    reps = np.ones((40, 2))
    reps[:30, 1] = np.nan
    env = pointwise_envelope(bundle(reps, point=[1.0, 1.0]))
    assert env.unreliable.tolist() == [False, True]
    assert env.lo[1] == 1.0
    reps[:, 1] = np.nan
    env = pointwise_envelope(bundle(reps, point=[1.0, 1.0]))
    assert math.isnan(env.lo[1])


def test_envelope_level_bounds():
    with pytest.raises(errors.ConfigError):
        pointwise_envelope(bundle(np.ones((30, 1))), 0.0)


# ---------------------------------------------------------------- permutation null

def test_permutation_needs_time_rule():
    with pytest.raises(errors.RuleNotPermutable):
        permutation_null_curves(running_example(), equal_width_bands(10, 2),
                                RelatednessRule.mark("serotype"), R=5)


def test_permutation_two_cases_equals_point():
    ds = CaseDataset.from_arrays([0, 3], [0, 0], [0, 4])
    b = permutation_null_curves(ds, BandSet((Band(0, 5), Band(5, 10))), R05, R=20, seed=2)
    assert b.kind == PERMUTATION_NULL
    for row in b.replicates:
        assert np.array_equal(row, b.point_estimate.values, equal_nan=True)


def test_permutation_keeps_time_multiset():
    ds = random_dataset(np.random.default_rng(8), n_max=20, noncases=False)
    f = CurveFactory(ds, equal_width_bands(10, 3), R05)
    total = f.point().n_related
    for r in range(10):
        c = f.permuted(replicate_rng(0, r))
        # same locations, so each band keeps its pair count
        assert np.array_equal(c.n_related + c.n_denominator, f.point().n_related + f.point().n_denominator)
    assert total is not None


def test_permutation_prev_noncases_stay_unrelated():
    ds = random_dataset(np.random.default_rng(9), n_max=25)
    b = permutation_null_curves(ds, equal_width_bands(10, 3), R05, PREV, R=10, seed=1, workers=2)
    b1 = permutation_null_curves(ds, equal_width_bands(10, 3), R05, PREV, R=10, seed=1, workers=1)
    assert b.replicates.tobytes() == b1.replicates.tobytes()


def test_permutation_rate_not_supported():
    panel = uniform_person_time_panel(np.random.default_rng(3))
    with pytest.raises(errors.ConfigError):
        permutation_null_curves(panel, equal_width_bands(10, 2), R05, RATE, R=3)


def test_permutation_null_pooled_mean_near_one():
    cfg = EpidemicConfig(population_n=2000, initial_cases=10, seed_window=30)
    ds = simulate_epidemic(cfg, seed=4).dataset
    bands = equal_width_bands(400, 8)
    b = permutation_null_curves(ds, bands, RelatednessRule.temporal(0, 20), R=199, seed=3)
    v = b.replicates[np.isfinite(b.replicates)]
    assert 0.8 <= v.mean() <= 1.25


# ---------------------------------------------------------------- global test

def null_bundle(reps, observed=None):
    return bundle(reps, point=observed, kind=PERMUTATION_NULL)


def test_global_identical_curves_p_one():
    reps = np.ones((39, 3))
    res = global_envelope_test(curve([1, 1, 1]), null_bundle(reps))
    assert res.p_value == 1.0 and not res.reject


def test_global_strictly_above_minimum_p():
    rng = np.random.default_rng(0)
    reps = rng.uniform(0.5, 1.5, (99, 1))
    res = global_envelope_test(curve([5.0]), null_bundle(reps))
    # two-sided: with one band the lowest null is exactly as extreme as the observed
    assert res.p_value == pytest.approx(2 / 100) and res.reject
    reps = rng.uniform(0.5, 1.5, (99, 4))
    res = global_envelope_test(curve([5.0, 5.0, 5.0, 5.0]), null_bundle(reps))
    assert res.p_value == pytest.approx(1 / 100)


def test_global_above_at_one_band_counts_two_sided_ties():
    # nulls that are pointwise extreme at other bands share the extreme rank 1
    rng = np.random.default_rng(0)
    reps = rng.uniform(0.5, 1.5, (99, 4))
    obs = np.median(reps, axis=0)
    obs[1] = 5.0
    res = global_envelope_test(curve(obs), null_bundle(reps))
    pool = np.vstack([obs, reps])
    extreme = {int(np.argmin(pool[:, b])) for b in range(4)} | {int(np.argmax(pool[:, b])) for b in range(4)}
    assert 1 / 100 <= res.p_value <= len(extreme) / 100


def test_global_insufficient_replicates():
    with pytest.raises(errors.InsufficientReplicates):
        global_envelope_test(curve([1, 1]), null_bundle(np.ones((38, 2))), alpha=0.05)
    global_envelope_test(curve([1, 1]), null_bundle(np.ones((39, 2))), alpha=0.05)
    with pytest.raises(errors.InsufficientReplicates):
        global_envelope_test(curve([1, 1]), null_bundle(np.ones((198, 2))), alpha=0.01)


def test_global_needs_permutation_bundle():
    with pytest.raises(errors.ConfigError):
        global_envelope_test(curve([1, 1]), bundle(np.ones((50, 2))))


def test_global_rank_vs_erl_tiebreak():
    # both curves reach the same extreme rank; erl looks at the next-most extreme
    rng = np.random.default_rng(1)
    reps = rng.normal(1, 0.1, (59, 3))
    obs = np.median(reps, axis=0)
    obs[0] = reps[:, 0].max() + 1
    erl = global_envelope_test(curve(obs), null_bundle(reps), method="erl")
    rank = global_envelope_test(curve(obs), null_bundle(reps), method="rank")
    assert erl.p_value <= rank.p_value
    assert rank.p_value >= 1 / 60


def test_global_skips_undefined_bands():
    reps = np.random.default_rng(2).uniform(0.5, 1.5, (49, 3))
    reps[3, 2] = np.nan
    res = global_envelope_test(curve([1.0, 1.0, 1.0]), null_bundle(reps))
    assert res.bands_used.tolist() == [True, True, False]


def test_global_p_is_uniform_under_exchangeability():
    # observed drawn from the same law as the nulls: P(p <= alpha) ~ alpha
    rng = np.random.default_rng(3)
    hits = 0
    runs = 400
    for _ in range(runs):
        pool = rng.normal(size=(40, 5))
        res = global_envelope_test(curve(pool[0]), null_bundle(pool[1:]), alpha=0.05)
        hits += res.reject
    assert hits / runs <= 0.05 + 3 * math.sqrt(0.05 * 0.95 / runs)


def test_global_bounds_contain_typical_nulls():
    reps = np.random.default_rng(4).normal(1, 0.2, (199, 4))
    res = global_envelope_test(curve(np.ones(4)), null_bundle(reps))
    assert (res.global_lo <= 1).all() and (res.global_hi >= 1).all()
    assert res.to_dict()["bounds"]["lo"] is not None


# ---------------------------------------------------------------- clustering range

def test_crossing_interpolation_example():
    d, cens = crossing_distance([25, 50], [4, 0.5])
    assert not cens and d == pytest.approx(46.428571428571, abs=1e-9)
    assert d == 25 + 25 * 3 / 3.5


def test_crossing_exact_on_piecewise_linear():
    x = np.array([10.0, 20, 30, 40])
    for root in (12.5, 21.0, 37.0):
        y = np.interp(x, [0, root, 100], [3.0, 1.0, 0.2])
        # piecewise linear with a single knot at the root of tau = 1
        d, _ = crossing_distance(x, y)
        lo = x[np.searchsorted(x, root) - 1]
        hi = x[np.searchsorted(x, root)]
        expect = lo + (hi - lo) * (np.interp(lo, [0, root, 100], [3, 1, .2]) - 1) / (
            np.interp(lo, [0, root, 100], [3, 1, .2]) - np.interp(hi, [0, root, 100], [3, 1, .2]))
        assert d == pytest.approx(expect, rel=1e-12)


def test_crossing_start_below_and_censored():
    assert crossing_distance([1, 2, 3], [1, 3, 0]) == (0.0, False)
    assert crossing_distance([1, 2, 3], [3, 2, 1.5]) == (3.0, True)
    assert crossing_distance([1, 2, 3], [3, np.nan, 0.5])[0] == pytest.approx(1 + 2 * 2 / 2.5)
    assert crossing_distance([1, 2, 3, 4], [3, 0.5, 2, 0.5], "last")[0] == pytest.approx(3 + 1 / 1.5)


def test_range_constant_one():
    r = clustering_range(bundle(np.ones((30, 4))))
    assert r.point == 0.0 and r.lo == 0.0 and r.hi == 0.0
    assert r.censored_fraction == 0.0


def test_range_censoring_and_all_censored():
    reps = np.array([[4, 0.5]] * 6 + [[3, 2]] * 4, dtype=float)
    r = clustering_range(bundle(reps, bands=equal_width_bands(50, 2)))
    assert r.censored_fraction == pytest.approx(0.4)
    assert r.point == pytest.approx(25 + 25 * 3 / 3.5)
    with pytest.raises(errors.AllCensored):
        clustering_range(bundle(np.full((10, 2), 3.0)))


def test_range_requires_bootstrap():
    with pytest.raises(errors.ConfigError):
        clustering_range(bundle(np.ones((5, 2)), kind=PERMUTATION_NULL))


def test_range_interval_from_replicates():
    rng = np.random.default_rng(0)
    roots = rng.uniform(20, 80, 200)
    x = equal_width_bands(100, 10).plot_points()
    reps = np.array([np.interp(x, [0, r, 200], [3, 1, 0]) for r in roots])
    r = clustering_range(bundle(reps, bands=equal_width_bands(100, 10)))
    assert r.lo <= r.point <= r.hi
    assert abs(r.point - np.median(roots)) < 1e-9 * 100 + 1e-9 or abs(r.point - np.median(roots)) < 5


# ---------------------------------------------------------------- legacy

def legacy_inputs(lo, medians):
    B = len(lo)
    bands = equal_width_bands(25.0 * B, B)
    reps = np.tile(np.asarray(medians, dtype=float), (21, 1))
    b = bundle(reps, bands=bands)
    env = pointwise_envelope(b)
    env = type(env)(env.level, np.asarray(lo, dtype=float), env.hi, env.unreliable)
    return b.point_estimate, env, b


def test_legacy_two_consecutive_bands():
    pt, env, b = legacy_inputs([2, 0.9, 0.8, 0.7], [3, 3, 3, 3])
    r = legacy_range_azman(pt, env, b)
    assert r.distance == 50.0 and r.criterion == "lower_bound_two_bands" and r.label == "LEGACY"


def test_legacy_median_threshold():
    pt, env, b = legacy_inputs([2, 2, 2, 2], [3, 2, 1.1, 0.5])
    r = legacy_range_azman(pt, env, b)
    assert r.distance == 75.0 and r.criterion == "median_below_threshold"


def test_legacy_earlier_trigger_wins():
    pt, env, b = legacy_inputs([2, 0.9, 0.9, 2], [3, 3, 3, 1.0])
    assert legacy_range_azman(pt, env, b).distance == 50.0
    pt, env, b = legacy_inputs([2, 2, 0.9, 0.9], [1.1, 3, 3, 3])
    assert legacy_range_azman(pt, env, b).distance == 25.0


def test_legacy_no_crossing():
    pt, env, b = legacy_inputs([2, 0.9, 2, 0.9], [1.5, 1.2, 1.3, 2])
    with pytest.raises(errors.NoCrossing):
        legacy_range_azman(pt, env, b)


# ---------------------------------------------------------------- end to end

def test_null_data_end_to_end():
    ds = simulate_null(150, seed=2)
    bands = equal_width_bands(300, 6)
    rule = RelatednessRule.temporal(0, 30)
    obs = odds_curve(ds, bands, rule, strict=False)
    nb = permutation_null_curves(ds, bands, rule, R=39, seed=1)
    res = global_envelope_test(obs, nb)
    assert 0 < res.p_value <= 1
    assert np.array_equal(nb.point_estimate.values, obs.values, equal_nan=True)
