"""Pair enumeration, relatedness, band tallies and pair person-time-at-risk.

Pairs are enumerated once as a condensed ``i < j`` table.  Band membership
goes through *elementary bins*: the sorted union of every band edge cuts the
axis into disjoint intervals, each pair lands in exactly one of them, and a
band ``[lo, hi)`` is an exact union of consecutive elementary bins.  This
handles annuli, discs and overlapping bands with a single pass over pairs and
integer arithmetic, so results do not depend on how the pair range is split
across workers.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import errors
from .bands import Band, BandSet
from .model import (EARTH_RADIUS_M, GEOGRAPHIC, MARK_EQUALITY,
                    PREVALENT_INCIDENT, TEMPORAL, CaseDataset, RelatednessRule)

UNRELATED, RELATED, INAPPLICABLE = 0, 1, 2

CASES_ONLY = "cases_only"
ALL_INDIVIDUALS = "all_individuals"

_TRUTHY = {"1", "true", "yes", "y", "prevalent", "p"}


# ---------------------------------------------------------------------------
# geometry

def _distances(coords_a, coords_b, crs_mode):
    if crs_mode == GEOGRAPHIC:
        lon1, lat1 = np.radians(coords_a[..., 0]), np.radians(coords_a[..., 1])
        lon2, lat2 = np.radians(coords_b[..., 0]), np.radians(coords_b[..., 1])
        h = (np.sin(0.5 * (lat2 - lat1)) ** 2
             + np.cos(lat1) * np.cos(lat2) * np.sin(0.5 * (lon2 - lon1)) ** 2)
        return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(h, 1.0)))
    dx = coords_a[..., 0] - coords_b[..., 0]
    dy = coords_a[..., 1] - coords_b[..., 1]
    return np.sqrt(dx * dx + dy * dy)


def point_distance(a, b, crs_mode="planar"):
    """Distance between two ``(x, y)`` points."""
    return float(_distances(np.asarray(a, float), np.asarray(b, float), crs_mode))


def pair_indices(n, rows=None):
    """Condensed ``(I, J)`` index arrays of all pairs ``i < j`` with ``i`` in ``rows``."""
    rows = np.arange(n, dtype=np.int64) if rows is None else np.asarray(rows, dtype=np.int64)
    counts = n - 1 - rows
    keep = counts > 0
    rows, counts = rows[keep], counts[keep]
    total = int(counts.sum())
    starts = np.cumsum(counts) - counts
    I = np.repeat(rows, counts)
    J = np.arange(total, dtype=np.int64) - np.repeat(starts, counts) + np.repeat(rows + 1, counts)
    return I.astype(np.int32), J.astype(np.int32)


def pair_distances(dataset: CaseDataset, I=None, J=None):
    """Distances of the condensed pairs (all pairs when ``I``/``J`` are omitted)."""
    if I is None:
        I, J = pair_indices(len(dataset))
    c = dataset.coords
    return _distances(c[I], c[J], dataset.crs_mode)


def _row_chunks(n, k):
    # split rows 0..n-1 into k contiguous chunks with roughly equal pair counts
    if k <= 1 or n < 4:
        return [np.arange(n)]
    weight = np.cumsum(np.arange(n - 1, -1, -1))
    total = weight[-1]
    cuts = [0] + [int(np.searchsorted(weight, total * q / k)) + 1 for q in range(1, k)] + [n]
    cuts = sorted(set(min(c, n) for c in cuts))
    return [np.arange(a, b) for a, b in zip(cuts, cuts[1:]) if b > a]


# ---------------------------------------------------------------------------
# relatedness

def _flagged(value):
    return str(value).strip().lower() in _TRUTHY


def evaluate_relatedness(rule: RelatednessRule, i, j):
    """Relatedness of individuals ``i`` and ``j``: ``"related"``, ``"unrelated"`` or ``"inapplicable"``."""
    if rule.kind == TEMPORAL:
        if i.t is None or j.t is None:
            return "inapplicable"
        return "related" if rule.t1 <= abs(j.t - i.t) <= rule.t2 else "unrelated"
    if rule.kind == MARK_EQUALITY:
        a, b = i.marks.get(rule.mark_name), j.marks.get(rule.mark_name)
        if not a or not b:
            return "inapplicable"
        return "related" if a == b else "unrelated"
    if rule.kind == PREVALENT_INCIDENT:
        a, b = i.marks.get(rule.mark_name), j.marks.get(rule.mark_name)
        if a is None or b is None or a == "" or b == "":
            return "inapplicable"
        return "related" if _flagged(a) != _flagged(b) else "unrelated"
    results = [evaluate_relatedness(r, i, j) for r in rule.rules]
    if "unrelated" in results:
        return "unrelated"
    if "inapplicable" in results:
        return "inapplicable"
    return "related"


class RuleContext:
    """Per-dataset arrays needed to evaluate a rule over many pairs."""

    def __init__(self, dataset: CaseDataset, rule: RelatednessRule):
        self.rule = rule
        self.times = np.asarray(dataset.times, dtype=float)
        self.marks = {}
        self.flags = {}
        for leaf in rule.leaves():
            if leaf.kind == MARK_EQUALITY:
                self.marks[leaf.mark_name] = dataset.mark_codes(leaf.mark_name)
            elif leaf.kind == PREVALENT_INCIDENT:
                f = np.full(len(dataset), -1, dtype=np.int8)
                for k, ind in enumerate(dataset.individuals):
                    v = ind.marks.get(leaf.mark_name)
                    if v is not None and v != "":
                        f[k] = 1 if _flagged(v) else 0
                self.flags[leaf.mark_name] = f

    def codes(self, I, J, times=None):
        times = self.times if times is None else times
        return self._codes(self.rule, I, J, times)

    def _codes(self, rule, I, J, times):
        if rule.kind == TEMPORAL:
            dt = np.abs(times[J] - times[I])
            out = ((dt >= rule.t1) & (dt <= rule.t2)).astype(np.int8)
            out[np.isnan(dt)] = INAPPLICABLE
            return out
        if rule.kind == MARK_EQUALITY:
            m = self.marks[rule.mark_name]
            a, b = m[I], m[J]
            out = (a == b).astype(np.int8)
            out[(a < 0) | (b < 0)] = INAPPLICABLE
            return out
        if rule.kind == PREVALENT_INCIDENT:
            f = self.flags[rule.mark_name]
            a, b = f[I], f[J]
            out = (a != b).astype(np.int8)
            out[(a < 0) | (b < 0)] = INAPPLICABLE
            return out
        parts = [self._codes(r, I, J, times) for r in rule.rules]
        any_unrel = np.zeros(len(I), dtype=bool)
        any_inap = np.zeros(len(I), dtype=bool)
        for p in parts:
            any_unrel |= p == UNRELATED
            any_inap |= p == INAPPLICABLE
        out = np.full(len(I), RELATED, dtype=np.int8)
        out[any_inap] = INAPPLICABLE
        out[any_unrel] = UNRELATED
        return out


# ---------------------------------------------------------------------------
# pair tables and elementary binning

@dataclass
class PairTable:
    """Condensed pairs with their axis value and relatedness code.

    ``I``/``J`` index the *units* of the table (the individuals included in
    the analysis); ``n_units`` is their count.  Bootstrap replicates reuse a
    table with per-unit multiplicity weights.
    """

    I: np.ndarray
    J: np.ndarray
    value: np.ndarray
    code: np.ndarray
    n_units: int
    units: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.I)


class Binner:
    """Maps axis values to elementary bins of a band set and back to bands."""

    def __init__(self, bands: BandSet):
        self.bands = bands
        finite = sorted({b.lo for b in bands} | {b.hi for b in bands if math.isfinite(b.hi)})
        self.edges = np.array(finite, dtype=float)
        n_edge = len(self.edges)
        # elementary bin e: e=0 is v < edges[0]; e=k covers [edges[k-1], edges[k]) with edges[n_edge]=inf
        self.n_bins = n_edge + 1
        self.slices = []
        for b in bands:
            start = int(np.searchsorted(self.edges, b.lo)) + 1
            stop = int(np.searchsorted(self.edges, b.hi)) + 1 if math.isfinite(b.hi) else self.n_bins
            self.slices.append((start, stop))

    def bin(self, values):
        return np.searchsorted(self.edges, values, side="right")

    def to_bands(self, elem):
        """Aggregate per-elementary-bin rows (first axis) into per-band rows."""
        elem = np.asarray(elem)
        out = np.zeros((len(self.slices),) + elem.shape[1:], dtype=elem.dtype)
        exact_float = elem.dtype.kind == "f" and elem.ndim == 1
        for k, (a, b) in enumerate(self.slices):
            # fsum: band sums independent of summation order
            out[k] = math.fsum(elem[a:b]) if exact_float else elem[a:b].sum(axis=0)
        return out


def _counts_by_code(bins, code, n_bins, weights=None):
    key = bins.astype(np.int64) * 3 + code
    if weights is None:
        c = np.bincount(key, minlength=n_bins * 3)
    else:
        c = np.rint(np.bincount(key, weights=weights, minlength=n_bins * 3)).astype(np.int64)
    return c.reshape(n_bins, 3)


@dataclass(frozen=True)
class PairTally:
    """Per-band unordered pair counts plus the all-distance ``(0, inf)`` totals."""

    bands: BandSet
    related: np.ndarray
    unrelated: np.ndarray
    total: np.ndarray
    global_related: int
    global_unrelated: int
    global_total: int
    mode: str = CASES_ONLY

    def to_dict(self):
        return {
            "mode": self.mode,
            "bands": self.bands.to_list(),
            "related": self.related.tolist(),
            "unrelated": self.unrelated.tolist(),
            "total": self.total.tolist(),
            "global": {"related": self.global_related, "unrelated": self.global_unrelated,
                       "total": self.global_total},
        }


def _tally_from_elem(elem, binner, inapplicable, mode):
    # elem: (n_bins, 3) integer counts by code
    rel = elem[:, RELATED]
    unrel = elem[:, UNRELATED] + (elem[:, INAPPLICABLE] if inapplicable == "unrelated" else 0)
    per_band = binner.to_bands(np.stack([rel, unrel], axis=1))
    g_rel, g_unrel = int(rel.sum()), int(unrel.sum())
    return PairTally(binner.bands, per_band[:, 0].copy(), per_band[:, 1].copy(),
                     per_band[:, 0] + per_band[:, 1], g_rel, g_unrel, g_rel + g_unrel, mode)


def _select_units(dataset, mode):
    if mode == CASES_ONLY:
        return np.flatnonzero(dataset.is_case)
    if mode == ALL_INDIVIDUALS:
        return np.arange(len(dataset))
    raise errors.ConfigError(f"unknown tally mode {mode!r}")


def _table_rows(dataset, ctx, units, rows, mode):
    I, J = pair_indices(len(units), rows)
    gi, gj = units[I], units[J]
    d = _distances(dataset.coords[gi], dataset.coords[gj], dataset.crs_mode)
    code = ctx.codes(gi, gj)
    if mode == ALL_INDIVIDUALS:
        code[~(dataset.is_case[gi] & dataset.is_case[gj])] = UNRELATED
    return I, J, d, code


def build_pair_table(dataset: CaseDataset, rule: RelatednessRule, mode=CASES_ONLY, workers=1):
    """All included pairs with distance and relatedness code."""
    units = _select_units(dataset, mode)
    ctx = RuleContext(dataset, rule)
    chunks = _row_chunks(len(units), workers)
    parts = _map(lambda rows: _table_rows(dataset, ctx, units, rows, mode), chunks, workers)
    I, J, d, code = (np.concatenate([p[k] for p in parts]) for k in range(4))
    return PairTable(I, J, d, code, len(units), units)


def tally_table(table: PairTable, bands: BandSet, weights=None, inapplicable="unrelated",
                mode=CASES_ONLY, binner=None, bins=None):
    """Tally a pair table into bands.

    ``weights`` (one per unit) turn the table into a resampled multiset: the
    pair ``(a, b)`` counts ``weights[a] * weights[b]`` times.
    """
    binner = binner or Binner(bands)
    if bins is None:
        bins = binner.bin(table.value)
    w = None
    if weights is not None:
        weights = np.asarray(weights, dtype=np.int64)
        w = (weights[table.I] * weights[table.J]).astype(np.float64)
    if inapplicable == "drop":
        keep = table.code != INAPPLICABLE
        elem = _counts_by_code(bins[keep], table.code[keep], binner.n_bins,
                               None if w is None else w[keep])
    else:
        elem = _counts_by_code(bins, table.code, binner.n_bins, w)
    return _tally_from_elem(elem, binner, inapplicable, mode)


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def tally_pairs(dataset: CaseDataset, bands: BandSet, rule: RelatednessRule, mode=CASES_ONLY,
                inapplicable=None, workers=1):
    """Count related/unrelated unordered pairs per band.

    Parameters
    ----------
    mode : {"cases_only", "all_individuals"}
        ``cases_only`` ignores non-cases (odds estimator).  ``all_individuals``
        pairs everyone; only case-case pairs can be related (prevalence
        estimator).
    inapplicable : {"unrelated", "drop"}
        What to do with pairs whose relatedness cannot be evaluated (missing
        mark or onset).  Default ``"unrelated"``.
    workers : int
        Row-range partitions counted in parallel; counts are integers so the
        result is identical for any worker count.
    """
    inapplicable = inapplicable or "unrelated"
    if inapplicable not in ("unrelated", "drop"):
        raise errors.ConfigError(f"inapplicable must be 'unrelated' or 'drop', got {inapplicable!r}")
    units = _select_units(dataset, mode)
    ctx = RuleContext(dataset, rule)
    binner = Binner(bands)

    def count(rows):
        _, _, d, code = _table_rows(dataset, ctx, units, rows, mode)
        if inapplicable == "drop":
            keep = code != INAPPLICABLE
            d, code = d[keep], code[keep]
        return _counts_by_code(binner.bin(d), code, binner.n_bins)

    parts = _map(count, _row_chunks(len(units), workers), workers)
    elem = np.sum(parts, axis=0) if parts else np.zeros((binner.n_bins, 3), dtype=np.int64)
    return _tally_from_elem(elem, binner, inapplicable, mode)


# ---------------------------------------------------------------------------
# person-time-at-risk for the rate estimator

def _merge(intervals):
    out = []
    for a, b in sorted(intervals):
        if b <= a:
            continue
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def _subtract(base, holes):
    out = []
    holes = _merge(holes)
    for a, b in base:
        cur = a
        for ha, hb in holes:
            if hb <= cur or ha >= b:
                continue
            if ha > cur:
                out.append((cur, ha))
            cur = max(cur, hb)
            if cur >= b:
                break
        if cur < b:
            out.append((cur, b))
    return out


def _intersect(xs, ys):
    out = []
    i = j = 0
    while i < len(xs) and j < len(ys):
        a = max(xs[i][0], ys[j][0])
        b = min(xs[i][1], ys[j][1])
        if a < b:
            out.append((a, b))
        if xs[i][1] < ys[j][1]:
            i += 1
        else:
            j += 1
    return out


def infectious_intervals(panel, k):
    """Union of person ``k``'s infectious periods within enrollment."""
    p = panel.persons[k]
    ivs = [(e.onset, panel.infectious_end(e)) for e in panel.episodes_by_person[k]]
    return _intersect(_merge(ivs), [(p.entry, p.exit)])


def susceptible_intervals(panel, k):
    """Times person ``k`` is enrolled and susceptible."""
    p = panel.persons[k]
    eps = panel.episodes_by_person[k]
    if panel.immunizing:
        holes = [(eps[0].onset, math.inf)] if eps else []
    else:
        holes = [(e.onset, e.recovery + panel.susceptibility_delay) for e in eps]
    return _subtract([(p.entry, p.exit)], holes)


def _segments(panel, k, intervals):
    """Cut ``intervals`` at person ``k``'s relocations: rows ``(start, end, x, y)``."""
    p = panel.persons[k]
    days = [rec[0] for rec in p.track[1:]]
    out = []
    for a, b in intervals:
        pts = [a] + [d for d in days if a < d < b] + [b]
        for s, e in zip(pts, pts[1:]):
            out.append((s, e) + tuple(p.location_at(0.5 * (s + e))))
    return np.array(out, dtype=float).reshape(-1, 4)


def _overlap(inf, sus):
    """Positive-length overlaps of two segment tables as (row, col, duration)."""
    lo = np.maximum(inf[:, None, 0], sus[None, :, 0])
    hi = np.minimum(inf[:, None, 1], sus[None, :, 1])
    r, c = np.nonzero(hi > lo)
    return r, c, hi[r, c] - lo[r, c]


def risk_pieces(panel, i, j):
    """Pieces ``(duration, distance)`` of the directed pair ``i -> j``.

    Each piece is a maximal stretch of time where ``i`` is infectious, ``j``
    is susceptible and neither moves.
    """
    if i == j:
        return []
    inf = _segments(panel, i, infectious_intervals(panel, i))
    sus = _segments(panel, j, susceptible_intervals(panel, j))
    r, c, dur = _overlap(inf, sus)
    order = np.argsort(np.maximum(inf[r, 0], sus[c, 0]), kind="stable")
    r, c, dur = r[order], c[order], dur[order]
    d = _distances(inf[r, 2:], sus[c, 2:], panel.crs_mode)
    return [(float(a), float(b)) for a, b in zip(dur, d)]


def pair_time_at_risk(panel, i, j, band: Band):
    """Time ``j`` is susceptible while ``i`` is infectious and ``d_ij(t)`` is in ``band``.

    ``i`` and ``j`` may be person ids or positions.  Directed: generally
    differs from ``pair_time_at_risk(panel, j, i, band)``.
    """
    i = panel.person_index(i) if isinstance(i, str) else int(i)
    j = panel.person_index(j) if isinstance(j, str) else int(j)
    if i == j:
        raise errors.ConfigError("pair_time_at_risk needs two different persons")
    return float(sum(dur for dur, d in risk_pieces(panel, i, j) if band.lo <= d < band.hi))


@dataclass(frozen=True)
class RateTally:
    """Per-band directed related-episode-pair counts and pair time at risk."""

    bands: BandSet
    related: np.ndarray
    pair_time: np.ndarray
    global_related: int
    global_pair_time: float
    flagged: tuple = ()

    def to_dict(self):
        return {
            "bands": self.bands.to_list(),
            "related_episode_pairs": self.related.tolist(),
            "pair_time": self.pair_time.tolist(),
            "global": {"related_episode_pairs": self.global_related,
                       "pair_time": self.global_pair_time},
            "flagged_bands": list(self.flagged),
        }


@dataclass
class RateTable:
    """Flattened ingredients of the rate tally, indexed by person position."""

    piece_i: np.ndarray
    piece_j: np.ndarray
    piece_dur: np.ndarray
    piece_dist: np.ndarray
    ep_i: np.ndarray
    ep_j: np.ndarray
    ep_dist: np.ndarray
    n_units: int


def _check_rate_rule(rule):
    if any(leaf.kind != TEMPORAL for leaf in rule.leaves()):
        raise errors.ConfigError("the rate estimator supports temporal relatedness rules only")


def build_rate_table(panel, rule: RelatednessRule, workers=1):
    _check_rate_rule(rule)
    n = len(panel.persons)
    inf_rows, sus_rows = [], []
    for k in range(n):
        seg = _segments(panel, k, susceptible_intervals(panel, k))
        sus_rows.append(np.column_stack([np.full(len(seg), k), seg]))
        if panel.episodes_by_person[k]:
            seg = _segments(panel, k, infectious_intervals(panel, k))
            inf_rows.append(np.column_stack([np.full(len(seg), k), seg]))
    inf = np.concatenate(inf_rows) if inf_rows else np.zeros((0, 5))
    sus = np.concatenate(sus_rows) if sus_rows else np.zeros((0, 5))
    # infectious segments in blocks so the overlap matrix stays small
    step = max(1, 2_000_000 // max(1, len(sus)))

    def pieces_for(start):
        blk = inf[start:start + step]
        r, c, dur = _overlap(blk[:, 1:], sus[:, 1:])
        keep = blk[r, 0] != sus[c, 0]
        r, c, dur = r[keep], c[keep], dur[keep]
        d = _distances(blk[r, 3:], sus[c, 3:], panel.crs_mode)
        return np.column_stack([blk[r, 0], sus[c, 0], dur, d])

    chunks = _map(pieces_for, list(range(0, len(inf), step)), workers)
    arr = np.concatenate(chunks) if chunks else np.zeros((0, 4))
    # episode pairs l -> m with k_l != k_m, related on onset difference
    onsets, owner, locs = [], [], []
    for k, eps in enumerate(panel.episodes_by_person):
        for e in eps:
            onsets.append(e.onset)
            owner.append(k)
            locs.append(panel.persons[k].location_at(e.onset))
    onsets = np.array(onsets, dtype=float)
    owner = np.array(owner, dtype=np.int64)
    locs = np.array(locs, dtype=float).reshape(-1, 2)
    if len(onsets):
        L, M = np.meshgrid(np.arange(len(onsets)), np.arange(len(onsets)), indexing="ij")
        L, M = L.ravel(), M.ravel()
        keep = owner[L] != owner[M]
        L, M = L[keep], M[keep]
        ctx_times = onsets
        code = _rate_codes(rule, ctx_times, L, M)
        sel = code == RELATED
        L, M = L[sel], M[sel]
        ep_dist = _distances(locs[L], locs[M], panel.crs_mode)
        ep_i, ep_j = owner[L], owner[M]
    else:
        ep_i = ep_j = np.zeros(0, dtype=np.int64)
        ep_dist = np.zeros(0)
    return RateTable(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2], arr[:, 3],
                     ep_i, ep_j, ep_dist, n)


def _rate_codes(rule, times, L, M):
    if rule.kind == TEMPORAL:
        dt = np.abs(times[M] - times[L])
        return ((dt >= rule.t1) & (dt <= rule.t2)).astype(np.int8)
    parts = [_rate_codes(r, times, L, M) for r in rule.rules]
    return np.minimum.reduce(parts)


def tally_rate_table(table: RateTable, bands: BandSet, weights=None, binner=None):
    binner = binner or Binner(bands)
    if weights is None:
        wp = np.ones(len(table.piece_i))
        we = None
    else:
        weights = np.asarray(weights, dtype=np.int64)
        wp = (weights[table.piece_i] * weights[table.piece_j]).astype(float)
        we = (weights[table.ep_i] * weights[table.ep_j]).astype(float)
    tb = np.bincount(binner.bin(table.piece_dist), weights=table.piece_dur * wp,
                     minlength=binner.n_bins)
    eb = np.bincount(binner.bin(table.ep_dist), weights=we, minlength=binner.n_bins)
    eb = np.rint(eb).astype(np.int64)
    pair_time = binner.to_bands(tb)
    related = binner.to_bands(eb)
    flagged = tuple(int(k) for k in np.flatnonzero((pair_time == 0) & (related > 0)))
    if flagged:
        warnings.warn(f"bands {list(flagged)} count related episode pairs but have zero pair time",
                      RuntimeWarning, stacklevel=3)
    return RateTally(bands, related, pair_time, int(eb.sum()), math.fsum(tb), flagged)


def tally_rate(panel, bands: BandSet, rule: RelatednessRule, workers=1):
    """Directed related episode pairs and pair time at risk per band.

    Numerator: ordered episode pairs ``l -> m`` of different persons related
    under ``rule`` (onset-to-onset difference), with distance taken between
    each person's location at their own onset.  Denominator: person-time at
    risk summed over every ordered person pair.
    """
    return tally_rate_table(build_rate_table(panel, rule, workers), bands)

