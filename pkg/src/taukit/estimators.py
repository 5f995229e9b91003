"""Tau estimators: odds, prevalence, rate, the time form, the space-time map,
and the Cuzick-Edwards k-NN statistic as a spatial-only baseline.

Undefined band values are explicit: ``TauCurve.values`` holds NaN there and
``TauCurve.reasons`` carries the reason code, so callers never have to guess
why a value is missing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import errors
from .bands import TIME, BandSet
from .model import CaseDataset, RelatednessRule
from .pairing import (ALL_INDIVIDUALS, CASES_ONLY, Binner, PairTable, PairTally,
                      RateTally, _distances, pair_indices, tally_pairs, tally_table)

ODDS = "odds"
PREV = "prev"
RATE = "rate"
TIME_FORM = "time_form"
CUZICK_EDWARDS = "cuzick_edwards"

ZERO_UNRELATED = "ZeroUnrelatedInBand"
EMPTY_BAND = "EmptyBand"
ZERO_PAIR_TIME = "ZeroPairTime"
GLOBAL_ODDS = "GlobalOddsUndefined"
GLOBAL_PREV = "GlobalPrevalenceUndefined"
GLOBAL_RATE = "GlobalRateUndefined"

_DENOMINATOR_COLUMN = {ODDS: "n_unrelated", TIME_FORM: "n_unrelated", PREV: "n_total", RATE: "pair_time"}


@dataclass(frozen=True)
class TauCurve:
    """Tau per band.

    Attributes
    ----------
    values : ndarray
        Tau per band; NaN where undefined.
    reasons : tuple
        ``None`` where defined, else a reason code such as ``"EmptyBand"``.
    n_related, n_denominator : ndarray
        Numerator count and the estimator's denominator quantity per band
        (unrelated pairs, total pairs, or pair time at risk).
    """

    estimator: str
    bands: BandSet
    values: np.ndarray
    reasons: tuple
    n_related: np.ndarray = None
    n_denominator: np.ndarray = None
    plot_convention: str = "band_end"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.values) != len(self.bands):
            raise errors.ConfigError("curve length does not match its band set")

    def __len__(self):
        return len(self.values)

    @property
    def defined(self):
        return np.array([r is None for r in self.reasons], dtype=bool)

    def plot_points(self, convention=None):
        return self.bands.plot_points(convention or self.plot_convention)

    def to_dict(self):
        return {
            "estimator": self.estimator,
            "bands": self.bands.to_list(),
            "plot_x": _jsonable(self.plot_points()),
            "plot_convention": self.plot_convention,
            "tau": _jsonable(self.values),
            "reasons": list(self.reasons),
            "n_related": _jsonable(self.n_related),
            _DENOMINATOR_COLUMN.get(self.estimator, "denominator"): _jsonable(self.n_denominator),
        }

    def write_csv(self, path):
        den = _DENOMINATOR_COLUMN.get(self.estimator, "denominator")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["band_lo", "band_hi", "plot_x", "tau", "n_related", den, "defined", "reason"])
            for k, b in enumerate(self.bands):
                w.writerow([_fmt(b.lo), _fmt(b.hi), _fmt(self.plot_points()[k]), _fmt(self.values[k]),
                            _fmt(self.n_related[k]), _fmt(self.n_denominator[k]),
                            int(self.reasons[k] is None), self.reasons[k] or ""])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return ""
    if math.isinf(v):
        return "inf"
    return repr(v)


def _jsonable(a):
    if a is None:
        return None
    out = []
    for v in np.asarray(a).tolist():
        if isinstance(v, float) and (math.isnan(v) or math.isinf(v)):
            out.append(None if math.isnan(v) else "inf")
        else:
            out.append(v)
    return out


def _ratio_curve(estimator, bands, num, den, g_num, g_den, empty_reason, zero_den_reason,
                 global_reason, global_defined, meta=None):
    """tau = (num/den) / (g_num/g_den), with explicit reasons where undefined.

    A band whose tallies coincide with the global tallies has tau = 1 by
    construction, including when the global ratio itself is degenerate.
    """
    num = np.asarray(num)
    den = np.asarray(den)
    values = np.full(len(bands), np.nan)
    reasons = []
    for k in range(len(bands)):
        if num[k] == g_num and den[k] == g_den:
            values[k] = 1.0
            reasons.append(None)
        elif not global_defined:
            reasons.append(global_reason)
        elif den[k] == 0:
            reasons.append(empty_reason if num[k] == 0 else zero_den_reason)
        else:
            values[k] = float(num[k] * g_den) / float(den[k] * g_num)
            reasons.append(None)
    return TauCurve(estimator, bands, values, tuple(reasons), num.copy(), den.copy(),
                    meta=dict(meta or {}))


def tau_odds(tally: PairTally, strict=True, estimator=ODDS):
    """Odds-ratio tau: the related/unrelated odds in each band over the odds at any distance.

    Raises :class:`~taukit.errors.GlobalOddsUndefined` when the dataset has
    no related or no unrelated pairs at all, unless ``strict=False``, in
    which case every band not identical to the global band is undefined.
    """
    if tally.mode != CASES_ONLY and strict:
        raise errors.ConfigError("the odds estimator needs a cases_only tally")
    ok = tally.global_related > 0 and tally.global_unrelated > 0
    if not ok and strict:
        raise errors.GlobalOddsUndefined(
            f"global odds undefined ({tally.global_related} related, "
            f"{tally.global_unrelated} unrelated pairs)")
    return _ratio_curve(estimator, tally.bands, tally.related, tally.unrelated,
                        tally.global_related, tally.global_unrelated,
                        EMPTY_BAND, ZERO_UNRELATED, GLOBAL_ODDS, ok)


def tau_prev(tally: PairTally, strict=True):
    """Relative-prevalence tau: share of related pairs in a band over the share at any distance."""
    if tally.mode != ALL_INDIVIDUALS and strict:
        raise errors.ConfigError("the prevalence estimator needs an all_individuals tally")
    ok = tally.global_related > 0
    if not ok and strict:
        raise errors.GlobalPrevalenceUndefined("no related pairs at any distance")
    return _ratio_curve(PREV, tally.bands, tally.related, tally.total,
                        tally.global_related, tally.global_total,
                        EMPTY_BAND, EMPTY_BAND, GLOBAL_PREV, ok)


def tau_rate(tally: RateTally, strict=True):
    """Rate-ratio tau: related episode pairs per unit pair time at risk, relative to all distances."""
    ok = tally.global_pair_time > 0 and tally.global_related > 0
    if not ok and strict:
        raise errors.GlobalRateUndefined(
            f"global rate undefined (pair time {tally.global_pair_time}, "
            f"{tally.global_related} related episode pairs)")
    return _ratio_curve(RATE, tally.bands, tally.related, tally.pair_time,
                        tally.global_related, tally.global_pair_time,
                        EMPTY_BAND, ZERO_PAIR_TIME, GLOBAL_RATE, ok)


def time_form_table(dataset: CaseDataset, distance_window):
    """Case pairs with |dt| as the axis value and ``d < distance_window`` as relatedness."""
    if not distance_window > 0:
        raise errors.NonPositiveArguments("distance_window must be positive")
    cases = np.flatnonzero(dataset.is_case)
    I, J = pair_indices(len(cases))
    gi, gj = cases[I], cases[J]
    d = _distances(dataset.coords[gi], dataset.coords[gj], dataset.crs_mode)
    lag = np.abs(dataset.times[gj] - dataset.times[gi])
    keep = ~np.isnan(lag)
    code = (d < distance_window).astype(np.int8)
    return PairTable(I[keep], J[keep], lag[keep], code[keep], len(cases), cases)


def tau_time_form(dataset: CaseDataset, time_bands: BandSet, distance_window, strict=True):
    """Tau over time-lag bands, with pairs related when closer than ``distance_window``."""
    if time_bands.axis != TIME:
        raise errors.ConfigError("the time form needs bands on the time axis")
    tally = tally_table(time_form_table(dataset, distance_window), time_bands)
    return tau_odds(tally, strict=strict, estimator=TIME_FORM)


@dataclass(frozen=True)
class TauMap:
    """Odds tau per (distance band, time-lag band) cell."""

    distance_bands: BandSet
    time_lag_bands: BandSet
    cells: np.ndarray
    reasons: tuple
    related: np.ndarray
    total: np.ndarray
    low_support: np.ndarray
    min_pairs: int = 10

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["d_lo", "d_hi", "lag_lo", "lag_hi", "tau", "n_related", "n_pairs",
                        "low_support", "defined", "reason"])
            for a, db in enumerate(self.distance_bands):
                for b, tb in enumerate(self.time_lag_bands):
                    r = self.reasons[a][b]
                    w.writerow([_fmt(db.lo), _fmt(db.hi), _fmt(tb.lo), _fmt(tb.hi),
                                _fmt(self.cells[a, b]), int(self.related[a, b]),
                                int(self.total[a]), int(self.low_support[a, b]),
                                int(r is None), r or ""])

    def to_dict(self):
        return {
            "distance_bands": self.distance_bands.to_list(),
            "time_lag_bands": self.time_lag_bands.to_list(),
            "tau": [_jsonable(row) for row in self.cells],
            "reasons": [list(r) for r in self.reasons],
            "n_related": self.related.tolist(),
            "n_pairs": self.total.tolist(),
            "low_support": self.low_support.tolist(),
            "min_pairs": self.min_pairs,
        }


def tau_spacetime_map(dataset: CaseDataset, distance_bands: BandSet, time_lag_bands: BandSet,
                      min_pairs=10):
    """Tau for every distance band x time-lag band cell.

    Cell ``(a, b)`` is the odds estimator at distance band ``a`` with pairs
    related when their onset lag falls in lag band ``b`` (half-open, like
    every band).  Cells whose related-pair count is below ``min_pairs`` are
    flagged low-support.
    """
    if not len(distance_bands) or not len(time_lag_bands):
        raise errors.ConfigError("both band sets must be non-empty")
    cases = np.flatnonzero(dataset.is_case)
    I, J = pair_indices(len(cases))
    gi, gj = cases[I], cases[J]
    d = _distances(dataset.coords[gi], dataset.coords[gj], dataset.crs_mode)
    lag = np.abs(dataset.times[gj] - dataset.times[gi])
    keep = ~np.isnan(lag)
    d, lag = d[keep], lag[keep]
    bd, bt = Binner(distance_bands), Binner(time_lag_bands)
    hist = np.bincount(bd.bin(d) * bt.n_bins + bt.bin(lag),
                       minlength=bd.n_bins * bt.n_bins).reshape(bd.n_bins, bt.n_bins)
    per_d = bd.to_bands(hist)                 # distance bands x elementary lag bins
    related = bt.to_bands(per_d.T).T          # distance bands x lag bands
    total = per_d.sum(axis=1)
    g_rel = bt.to_bands(hist.sum(axis=0))     # per lag band, all distances
    g_tot = int(hist.sum())
    cells = np.full(related.shape, np.nan)
    reasons = []
    for b in range(len(time_lag_bands)):
        curve = _ratio_curve(ODDS, distance_bands, related[:, b], total - related[:, b],
                             int(g_rel[b]), g_tot - int(g_rel[b]), EMPTY_BAND, ZERO_UNRELATED,
                             GLOBAL_ODDS, g_rel[b] > 0 and g_tot - g_rel[b] > 0)
        cells[:, b] = curve.values
        reasons.append(curve.reasons)
    reasons = tuple(tuple(reasons[b][a] for b in range(len(time_lag_bands)))
                    for a in range(len(distance_bands)))
    return TauMap(distance_bands, time_lag_bands, cells, reasons, related, total,
                  related < min_pairs, min_pairs)


def cuzick_edwards_tk(dataset: CaseDataset, k):
    """Number of (case, neighbour) pairs where the neighbour is one of the case's
    ``k`` nearest individuals and is itself a case.

    Equidistant neighbours at rank ``k`` are broken by smallest id.
    """
    n = len(dataset)
    if int(k) != k or k < 1 or k >= n:
        raise errors.KTooLarge(f"k must satisfy 1 <= k < N = {n}, got {k}")
    k = int(k)
    coords = dataset.coords
    ids = np.array(dataset.ids, dtype=object)
    id_rank = np.empty(n, dtype=np.int64)
    id_rank[np.array(sorted(range(n), key=lambda q: ids[q]))] = np.arange(n)
    is_case = dataset.is_case
    total = 0
    for i in np.flatnonzero(is_case):
        d = _distances(coords[i][None, :], coords, dataset.crs_mode)
        others = np.delete(np.arange(n), i)
        order = np.lexsort((id_rank[others], d[others]))
        total += int(is_case[others[order[:k]]].sum())
    return total


def odds_curve(dataset, bands, rule: RelatednessRule, workers=1, strict=True):
    """Shorthand: tally case pairs and apply the odds estimator."""
    return tau_odds(tally_pairs(dataset, bands, rule, CASES_ONLY, workers=workers), strict=strict)


def prev_curve(dataset, bands, rule: RelatednessRule, workers=1, strict=True):
    """Shorthand: tally all pairs and apply the prevalence estimator."""
    return tau_prev(tally_pairs(dataset, bands, rule, ALL_INDIVIDUALS, workers=workers), strict=strict)
