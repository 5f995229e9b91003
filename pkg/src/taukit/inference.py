"""Bootstrap envelopes, permutation nulls, global envelope tests and
clustering-range estimation.

Replicate ``r`` of a run with seed ``s`` draws from a Philox generator keyed
by ``(s, r)``, so each replicate is reproducible on its own and the bundle
is identical for any number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import errors
from .bands import BandSet
from .estimators import (ODDS, PREV, RATE, TauCurve, tau_odds, tau_prev, tau_rate)
from .model import CaseDataset, EpisodePanel, RelatednessRule
from .pairing import (ALL_INDIVIDUALS, CASES_ONLY, INAPPLICABLE, UNRELATED, Binner,
                      RuleContext, _counts_by_code, _tally_from_elem, build_pair_table,
                      build_rate_table, tally_rate_table)

BOOTSTRAP = "bootstrap"
PERMUTATION_NULL = "permutation_null"

RNG_NAME = f"numpy.random.Philox key=(seed, replicate) numpy-{np.__version__}"
_MASK64 = (1 << 64) - 1


def replicate_rng(seed, replicate):
    """Independent generator for one replicate of one run."""
    key = np.array([int(seed) & _MASK64, int(replicate) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class CurveFactory:
    """Recomputes one estimator's curve under resampling or permutation.

    The pair table (or the rate table) is built once; a bootstrap replicate
    is a vector of per-unit multiplicities and a permutation replicate is a
    shuffled vector of case onset times.
    """

    def __init__(self, data, bands: BandSet, rule: RelatednessRule, estimator=ODDS,
                 inapplicable="unrelated", workers=1):
        self.bands = bands
        self.rule = rule
        self.estimator = estimator
        self.inapplicable = inapplicable
        self.binner = Binner(bands)
        if estimator == RATE:
            if not isinstance(data, EpisodePanel):
                raise errors.ConfigError("the rate estimator needs an episode panel")
            self.table = build_rate_table(data, rule, workers)
            self.n_units = len(data.persons)
            return
        if estimator not in (ODDS, PREV):
            raise errors.ConfigError(f"unknown estimator {estimator!r}")
        if not isinstance(data, CaseDataset):
            raise errors.ConfigError(f"the {estimator} estimator needs a case dataset")
        self.dataset = data
        self.mode = CASES_ONLY if estimator == ODDS else ALL_INDIVIDUALS
        self.table = build_pair_table(data, rule, self.mode, workers)
        self.n_units = self.table.n_units
        self.bins = self.binner.bin(self.table.value)
        self._keep = None
        if inapplicable == "drop":
            self._keep = self.table.code != INAPPLICABLE

    def _pair_curve(self, code, pair_weights=None):
        bins = self.bins
        if self._keep is not None:
            keep = self._keep & (code != INAPPLICABLE)
            bins, code = bins[keep], code[keep]
            if pair_weights is not None:
                pair_weights = pair_weights[keep]
        elem = _counts_by_code(bins, code, self.binner.n_bins, pair_weights)
        tally = _tally_from_elem(elem, self.binner, self.inapplicable, self.mode)
        if self.estimator == ODDS:
            return tau_odds(tally, strict=False)
        return tau_prev(tally, strict=False)

    def point(self):
        if self.estimator == RATE:
            return tau_rate(tally_rate_table(self.table, self.bands, binner=self.binner), strict=False)
        return self._pair_curve(self.table.code)

    def weighted(self, weights):
        if self.estimator == RATE:
            t = tally_rate_table(self.table, self.bands, weights=weights, binner=self.binner)
            return tau_rate(t, strict=False)
        w = np.asarray(weights, dtype=np.int64)
        pw = (w[self.table.I] * w[self.table.J]).astype(np.float64)
        return self._pair_curve(self.table.code, pw)

    def permuted(self, rng):
        if self.estimator == RATE:
            raise errors.ConfigError("permutation nulls are implemented for the odds and prev estimators")
        ds = self.dataset
        cases = np.flatnonzero(ds.is_case)
        times = np.array(ds.times, dtype=float)
        times[cases] = times[cases][rng.permutation(len(cases))]
        units = self.table.units
        gi, gj = units[self.table.I], units[self.table.J]
        code = self._ctx().codes(gi, gj, times)
        if self.mode == ALL_INDIVIDUALS:
            code[~(ds.is_case[gi] & ds.is_case[gj])] = UNRELATED
        return self._pair_curve(code)

    def _ctx(self):
        if not hasattr(self, "_rule_ctx"):
            self._rule_ctx = RuleContext(self.dataset, self.rule)
        return self._rule_ctx


@dataclass(frozen=True)
class CurveBundle:
    """A point estimate plus ``R`` replicate curves on the same bands."""

    point_estimate: TauCurve
    replicates: np.ndarray
    kind: str
    seed: int
    rng: str = RNG_NAME

    def __post_init__(self):
        if self.replicates.ndim != 2 or self.replicates.shape[0] < 1:
            raise errors.ConfigError("a bundle needs at least one replicate")
        if self.replicates.shape[1] != len(self.point_estimate):
            raise errors.ConfigError("replicate band axis differs from the point estimate")

    @property
    def R(self):
        return self.replicates.shape[0]

    @property
    def defined(self):
        return ~np.isnan(self.replicates)

    @property
    def bands(self):
        return self.point_estimate.bands


def _run_replicates(R, workers, fn):
    """Evaluate ``fn(r)`` for r in range(R) into an (R, B) matrix, in index order."""
    def chunk(rs):
        return [fn(r).values for r in rs]

    if workers <= 1 or R < 2:
        rows = chunk(range(R))
    else:
        parts = np.array_split(np.arange(R), min(workers * 4, R))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = [row for part in pool.map(chunk, parts) for row in part]
    return np.vstack(rows)


def bootstrap_curves(data, bands, rule, estimator=ODDS, R=500, seed=0, workers=1,
                     factory=None, inapplicable="unrelated"):
    """Resample sampling units with replacement and recompute the curve ``R`` times.

    Units are cases (odds), all individuals (prev) or persons with their
    episodes (rate).  Pairs between two copies of the same unit are never
    formed.
    """
    if int(R) != R or R < 1:
        raise errors.ConfigError(f"R must be a positive integer, got {R}")
    f = factory or CurveFactory(data, bands, rule, estimator, inapplicable, workers)
    n = f.n_units

    def one(r):
        idx = replicate_rng(seed, r).integers(0, n, size=n)
        return f.weighted(np.bincount(idx, minlength=n))

    reps = _run_replicates(int(R), workers, one)
    return CurveBundle(f.point(), reps, BOOTSTRAP, int(seed))


def permutation_null_curves(data, bands, rule, estimator=ODDS, R=199, seed=0, workers=1,
                            factory=None, inapplicable="unrelated"):
    """Curves under random reassignment of onset times to fixed case locations."""
    if not rule.uses_time:
        raise errors.RuleNotPermutable(
            f"rule {rule.describe()!r} does not use onset times; permuting them changes nothing")
    if int(R) != R or R < 1:
        raise errors.ConfigError(f"R must be a positive integer, got {R}")
    f = factory or CurveFactory(data, bands, rule, estimator, inapplicable, workers)

    def one(r):
        return f.permuted(replicate_rng(seed, r))

    reps = _run_replicates(int(R), workers, one)
    return CurveBundle(f.point(), reps, PERMUTATION_NULL, int(seed))


@dataclass(frozen=True)
class Envelope:
    level: float
    lo: np.ndarray
    hi: np.ndarray
    unreliable: np.ndarray

    def to_dict(self):
        from .estimators import _jsonable
        return {"level": self.level, "lo": _jsonable(self.lo), "hi": _jsonable(self.hi),
                "unreliable": self.unreliable.tolist()}


def pointwise_envelope(bundle: CurveBundle, level=0.95, min_replicates=20):
    """Per-band percentile bounds over defined replicate values.

    Percentiles use linear interpolation between order statistics.  Bands
    where more than half the replicates are undefined are marked unreliable.
    """
    if not 0 < level <= 1:
        raise errors.ConfigError(f"level must lie in (0, 1], got {level}")
    if bundle.R < min_replicates:
        raise errors.TooFewReplicates(f"{bundle.R} replicates; need at least {min_replicates}")
    q = (1 - level) / 2
    B = bundle.replicates.shape[1]
    lo, hi = np.full(B, np.nan), np.full(B, np.nan)
    for b in range(B):
        v = bundle.replicates[:, b]
        v = v[~np.isnan(v)]
        if len(v):
            lo[b], hi[b] = np.quantile(v, [q, 1 - q], method="linear")
    unreliable = bundle.defined.mean(axis=0) < 0.5
    return Envelope(float(level), lo, hi, unreliable)


@dataclass(frozen=True)
class EnvelopeTestResult:
    p_value: float
    alpha: float
    global_lo: np.ndarray
    global_hi: np.ndarray
    bands_used: np.ndarray
    method: str = "erl"

    @property
    def reject(self):
        return self.p_value <= self.alpha

    def to_dict(self):
        from .estimators import _jsonable
        return {"p": self.p_value, "alpha": self.alpha, "reject": bool(self.reject),
                "method": self.method,
                "bounds": {"lo": _jsonable(self.global_lo), "hi": _jsonable(self.global_hi)},
                "bands_used": self.bands_used.tolist()}


def _extremeness(curves, method):
    """Per-curve sort keys: smaller key = more extreme.  Rows of ``curves`` are curves."""
    n = curves.shape[0]
    low = np.column_stack([rankdata(curves[:, b], method="average") for b in range(curves.shape[1])])
    two_sided = np.minimum(low, n + 1 - low)
    if method == "rank":
        return two_sided.min(axis=1, keepdims=True)
    return np.sort(two_sided, axis=1)


def _lex_le_counts(keys):
    # for each row, number of rows whose key is lexicographically <= its own
    order = np.lexsort(keys.T[::-1])
    sk = keys[order]
    new = np.ones(len(sk), dtype=bool)
    new[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    group = np.cumsum(new) - 1
    group_end = np.zeros(group[-1] + 1, dtype=np.int64)
    np.maximum.at(group_end, group, np.arange(len(sk)) + 1)
    out = np.empty(len(sk), dtype=np.int64)
    out[order] = group_end[group]
    return out


def global_envelope_test(observed: TauCurve, null_bundle: CurveBundle, alpha=0.05, method="erl"):
    """Global rank-envelope test of the observed curve against a permutation null.

    Every curve in the pool (observed plus ``R`` nulls) gets two-sided
    pointwise mid-ranks; its extreme rank is the smallest of them.  With
    ``method="erl"`` ties in the extreme rank are broken by comparing the
    sorted rank vectors lexicographically (extreme rank length ordering);
    ``method="rank"`` uses the extreme rank alone.  The p-value is
    ``(1 + #{nulls at least as extreme}) / (R + 1)``.  Bands where any curve
    is undefined are left out of the ranking.
    """
    if null_bundle.kind != PERMUTATION_NULL:
        raise errors.ConfigError("global_envelope_test needs a permutation_null bundle")
    if method not in ("erl", "rank"):
        raise errors.ConfigError(f"unknown method {method!r}")
    R = null_bundle.R
    need = math.ceil(2 / alpha) - 1
    if R < need:
        raise errors.InsufficientReplicates(f"R = {R}; alpha = {alpha} needs at least {need}")
    pool = np.vstack([observed.values[None, :], null_bundle.replicates])
    used = ~np.isnan(pool).any(axis=0)
    if not used.any():
        raise errors.DegenerateError("no band is defined for every curve in the pool")
    keys = _extremeness(pool[:, used], method)
    le = _lex_le_counts(keys)
    p = le[0] / (R + 1)
    p_each = le / (R + 1)
    inside = null_bundle.replicates[p_each[1:] > alpha]
    if len(inside):
        g_lo = np.nanmin(inside, axis=0)
        g_hi = np.nanmax(inside, axis=0)
    else:
        g_lo = g_hi = np.full(pool.shape[1], np.nan)
    return EnvelopeTestResult(float(p), float(alpha), g_lo, g_hi, used, method)


@dataclass(frozen=True)
class RangeEstimate:
    """Clustering range ``D`` from bootstrap down-crossings of tau = 1."""

    point: float
    lo: float
    hi: float
    level: float
    censored_fraction: float
    per_replicate: np.ndarray
    censored: np.ndarray
    d_max: float
    crossing: str = "first"
    observed: float = float("nan")

    def to_dict(self):
        def f(v):
            return None if v is None or math.isnan(v) else float(v)
        return {"point": f(self.point), "lo": f(self.lo), "hi": f(self.hi), "level": self.level,
                "censored_fraction": self.censored_fraction, "crossing": self.crossing,
                "d_max": self.d_max, "observed_curve_D": f(self.observed)}


def crossing_distance(x, y, crossing="first"):
    """Distance where a curve crosses down to tau <= 1, by linear interpolation.

    Returns ``(D, censored)``.  Undefined points (NaN) are skipped.  A curve
    starting at or below 1 gives 0; a curve never returning to 1 is
    censored at the last plot point.
    """
    ok = ~np.isnan(y)
    x, y = np.asarray(x)[ok], np.asarray(y)[ok]
    if len(y) == 0:
        return math.nan, True
    down = [k for k in range(len(y) - 1) if y[k] > 1 and y[k + 1] <= 1]
    if crossing == "last":
        if y[-1] > 1:
            return float(x[-1]), True
        if not down:
            return 0.0, False
        k = down[-1]
    else:
        if y[0] <= 1:
            return 0.0, False
        if not down:
            return float(x[-1]), True
        k = down[0]
    return float(x[k] + (x[k + 1] - x[k]) * (y[k] - 1) / (y[k] - y[k + 1])), False


def clustering_range(bundle: CurveBundle, level=0.95, crossing="first", convention="band_end"):
    """Median and percentile interval of per-replicate crossing distances.

    Censored replicates (never crossing) are excluded from the median and
    interval and reported through ``censored_fraction``.
    """
    if bundle.kind != BOOTSTRAP:
        raise errors.ConfigError("clustering_range needs a bootstrap bundle")
    if crossing not in ("first", "last"):
        raise errors.ConfigError(f"crossing must be 'first' or 'last', got {crossing!r}")
    x = bundle.bands.plot_points(convention)
    D = np.empty(bundle.R)
    cens = np.zeros(bundle.R, dtype=bool)
    for r in range(bundle.R):
        D[r], cens[r] = crossing_distance(x, bundle.replicates[r], crossing)
    obs, _ = crossing_distance(x, bundle.point_estimate.values, crossing)
    frac = float(cens.mean())
    good = D[~cens]
    if not len(good):
        raise errors.AllCensored(f"all {bundle.R} replicates stay above tau = 1 up to {x[-1]:g}")
    q = (1 - level) / 2
    lo, hi = np.quantile(good, [q, 1 - q], method="linear")
    return RangeEstimate(float(np.median(good)), float(lo), float(hi), float(level), frac,
                         D, cens, float(x[-1]), crossing, obs)


@dataclass(frozen=True)
class LegacyRange:
    """Range from the consecutive-band / median-below-threshold heuristic (legacy)."""

    distance: float
    criterion: str
    label: str = "LEGACY"

    def to_dict(self):
        return {"distance": self.distance, "criterion": self.criterion, "label": self.label}


def legacy_range_azman(point: TauCurve, envelope: Envelope, bundle: CurveBundle,
                       threshold=1.2, convention="band_end"):
    """Legacy clustering-range heuristic kept for comparison with published analyses.

    Two triggers, the earlier one wins: the pointwise lower bound is at or
    below 1 in two consecutive bands starting at band ``k`` (range = end of
    band ``k``); or the per-band median of replicates first drops below
    ``threshold`` (range = that band's plot point).  It gives no
    uncertainty for the range.
    """
    lo = envelope.lo
    ends = point.bands.hi
    x = point.bands.plot_points(convention)
    hits = []
    for k in range(len(lo) - 1):
        if lo[k] <= 1 and lo[k + 1] <= 1:
            hits.append((float(ends[k]), "lower_bound_two_bands"))
            break
    with np.errstate(all="ignore"):
        med = np.array([np.median(c[~np.isnan(c)]) if (~np.isnan(c)).any() else np.nan
                        for c in bundle.replicates.T])
    below = np.flatnonzero(med < threshold)
    if len(below):
        hits.append((float(x[below[0]]), "median_below_threshold"))
    if not hits:
        raise errors.NoCrossing("lower bound never at or below 1 twice in a row and "
                                f"replicate median never below {threshold}")
    d, crit = min(hits)
    return LegacyRange(d, crit)

