import math

import numpy as np
import pytest

from taukit import errors
from taukit.bands import (DISCS, TIME, Band, BandSet, default_d_max, equal_count_bands,
                          equal_width_bands, expanding_discs, overlapping_bands, parse_band_spec)
from taukit.model import CaseDataset
from taukit.pairing import pair_distances


def collinear(xs):
    return CaseDataset.from_arrays(xs, [0.0] * len(xs), list(range(len(xs))))


def test_equal_width():
    assert equal_width_bands(100, 4).to_list() == [[0, 25], [25, 50], [50, 75], [75, 100]]
    assert equal_width_bands(10, 1).to_list() == [[0, 10]]
    with pytest.raises(errors.NonPositiveArguments):
        equal_width_bands(0, 4)
    with pytest.raises(errors.NonPositiveArguments):
        equal_width_bands(10, 0)


def test_equal_width_last_edge_exact():
    bs = equal_width_bands(0.3, 7)
    assert bs[-1].hi == 0.3
    assert all(a.hi == b.lo for a, b in zip(bs, bs.bands[1:]))


def test_expanding_discs():
    assert expanding_discs([50, 100]).to_list() == [[0, 50], [0, 100]]
    assert expanding_discs([25]).to_list() == [[0, 25]]
    with pytest.raises(errors.NonIncreasingCutpoints):
        expanding_discs([100, 50])
    assert expanding_discs([50, 100]).style == DISCS


def test_overlapping():
    assert overlapping_bands([50, 75], 25).to_list() == [[25, 75], [50, 100]]
    assert overlapping_bands([10], 25).to_list() == [[0, 35]]
    assert len(overlapping_bands([], 25)) == 0
    with pytest.raises(errors.NonPositiveArguments):
        overlapping_bands([10], 0)


def test_half_open_membership():
    b = Band(1.0, 2.0)
    assert 1.0 in b and 1.5 in b and 2.0 not in b and 0.999 not in b
    assert 1e300 in Band(0, math.inf)
    with pytest.raises(errors.NonPositiveArguments):
        Band(2, 2)
    with pytest.raises(errors.NonPositiveArguments):
        Band(-1, 2)


def test_equal_count_collinear_example():
    ds = collinear([0, 1, 2, 10])
    bs = equal_count_bands(ds, 2)
    assert bs.to_list()[0] == [0, 5.0]
    assert bs[1].lo == 5.0 and bs[1].hi > 10.0
    d = pair_distances(ds)
    counts = [int(np.sum((d >= b.lo) & (d < b.hi))) for b in bs]
    assert counts == [3, 3]


def test_equal_count_k1_and_too_few():
    ds = collinear([0, 1, 2, 10])
    bs = equal_count_bands(ds, 1)
    assert bs[0].lo == 0 and 10 < bs[0].hi < 10 + 1e-9
    with pytest.raises(errors.TooFewPairs):
        equal_count_bands(collinear([0, 1]), 3)


def test_equal_count_balanced_random():
    rng = np.random.default_rng(5)
    ds = CaseDataset.from_arrays(rng.uniform(0, 1, 30), rng.uniform(0, 1, 30), np.zeros(30))
    d = pair_distances(ds)
    for k in (2, 3, 7, 11):
        bs = equal_count_bands(ds, k)
        counts = [int(np.sum((d >= b.lo) & (d < b.hi))) for b in bs]
        assert sum(counts) == len(d)
        assert max(counts) - min(counts) <= 1


def test_annuli_must_tile():
    with pytest.raises(errors.ConfigError):
        BandSet((Band(0, 1), Band(2, 3)))
    with pytest.raises(errors.ConfigError):
        BandSet((Band(1, 2),))
    with pytest.raises(errors.ConfigError):
        BandSet((Band(0, 1, TIME),), axis="distance")


def test_plot_points():
    bs = equal_width_bands(100, 4)
    assert bs.plot_points().tolist() == [25, 50, 75, 100]
    assert bs.plot_points("band_midpoint").tolist() == [12.5, 37.5, 62.5, 87.5]
    with pytest.raises(errors.ConfigError):
        bs.plot_points("left")


def test_default_d_max_is_half_max_distance():
    assert default_d_max(collinear([0, 1, 2, 10])) == 5.0


def test_parse_band_spec():
    ds = collinear([0, 1, 2, 10])
    assert parse_band_spec("width:100:4").to_list() == equal_width_bands(100, 4).to_list()
    assert parse_band_spec("width:auto:2", ds).to_list() == [[0, 2.5], [2.5, 5]]
    assert parse_band_spec("discs:50,100,200").to_list() == [[0, 50], [0, 100], [0, 200]]
    assert len(parse_band_spec("eqcount:2", ds)) == 2
    assert parse_band_spec("overlap:50,75:25").to_list() == [[25, 75], [50, 100]]
    assert parse_band_spec("width:180:12", axis=TIME).axis == TIME
    for bad in ("width:10", "width:x:2", "blobs:3", "discs:", "overlap:1,2"):
        with pytest.raises(errors.ConfigError):
            parse_band_spec(bad)
