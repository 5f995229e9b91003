"""Half-open distance/time bands and the helpers that build band sets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import errors

DISTANCE = "distance"
TIME = "time"

ANNULI = "annuli"
DISCS = "discs"
OVERLAPPING = "overlapping"
EQUAL_COUNT = "equal_count"


@dataclass(frozen=True, order=True)
class Band:
    """Half-closed interval ``[lo, hi)``; ``hi`` may be ``math.inf``."""

    lo: float
    hi: float
    axis: str = DISTANCE

    def __post_init__(self):
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        if not (self.lo >= 0 and math.isfinite(self.lo)) or not self.hi > self.lo:
            raise errors.NonPositiveArguments(f"invalid band [{self.lo}, {self.hi})")

    def __contains__(self, value):
        return self.lo <= value < self.hi

    @property
    def midpoint(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def width(self):
        return self.hi - self.lo

    def __str__(self):
        return f"[{self.lo:g},{self.hi:g})"


@dataclass(frozen=True)
class BandSet:
    """An ordered tuple of bands sharing an axis."""

    bands: tuple
    style: str = ANNULI
    axis: str = DISTANCE

    def __post_init__(self):
        bands = tuple(sorted(self.bands, key=lambda b: (b.lo, b.hi)))
        object.__setattr__(self, "bands", bands)
        if any(b.axis != self.axis for b in bands):
            raise errors.ConfigError("all bands in a set must share one axis")
        if self.style == ANNULI or self.style == EQUAL_COUNT:
            for a, b in zip(bands, bands[1:]):
                if a.hi != b.lo:
                    raise errors.ConfigError(f"annuli must tile without gaps: {a} then {b}")
            if bands and bands[0].lo != 0.0:
                raise errors.ConfigError("annuli must start at 0")
        elif self.style == DISCS:
            if any(b.lo != 0.0 for b in bands):
                raise errors.ConfigError("discs must start at 0")
            if any(b.hi <= a.hi for a, b in zip(bands, bands[1:])):
                raise errors.ConfigError("disc radii must increase strictly")

    def __len__(self):
        return len(self.bands)

    def __iter__(self):
        return iter(self.bands)

    def __getitem__(self, k):
        return self.bands[k]

    @property
    def lo(self):
        return np.array([b.lo for b in self.bands])

    @property
    def hi(self):
        return np.array([b.hi for b in self.bands])

    @property
    def is_disjoint(self):
        return all(a.hi <= b.lo for a, b in zip(self.bands, self.bands[1:]))

    def plot_points(self, convention="band_end"):
        """x-position of each band on a tau-versus-distance graph."""
        if convention == "band_end":
            return self.hi.copy()
        if convention == "band_midpoint":
            return 0.5 * (self.lo + self.hi)
        raise errors.ConfigError(f"unknown plot convention {convention!r}")

    def scaled(self, s):
        return BandSet(tuple(Band(b.lo * s, b.hi * s, b.axis) for b in self.bands), self.style, self.axis)

    def to_list(self):
        return [[b.lo, b.hi] for b in self.bands]

    @classmethod
    def whole_line(cls, axis=DISTANCE):
        """The single band ``[0, inf)`` covering every pair."""
        return cls((Band(0.0, math.inf, axis),), ANNULI, axis)


def equal_width_bands(d_max, k, axis=DISTANCE):
    """``k`` contiguous annuli of width ``d_max / k`` covering ``[0, d_max)``."""
    if not (d_max > 0 and math.isfinite(d_max)) or int(k) != k or k < 1:
        raise errors.NonPositiveArguments(f"need d_max > 0 and integer k >= 1, got ({d_max}, {k})")
    k = int(k)
    edges = [d_max * i / k for i in range(k + 1)]
    edges[-1] = float(d_max)
    return BandSet(tuple(Band(a, b, axis) for a, b in zip(edges, edges[1:])), ANNULI, axis)


def expanding_discs(cutpoints, axis=DISTANCE):
    cuts = [float(c) for c in cutpoints]
    if not cuts or any(c <= 0 for c in cuts):
        raise errors.NonPositiveArguments("disc cutpoints must be positive")
    if any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise errors.NonIncreasingCutpoints(f"cutpoints must increase strictly: {cuts}")
    return BandSet(tuple(Band(0.0, c, axis) for c in cuts), DISCS, axis)


def overlapping_bands(centers, half_width, axis=DISTANCE):
    if not half_width > 0:
        raise errors.NonPositiveArguments(f"half_width must be positive, got {half_width}")
    if any(c < 0 for c in centers):
        raise errors.NonPositiveArguments("band centres must be non-negative")
    return BandSet(tuple(Band(max(0.0, c - half_width), c + half_width, axis) for c in centers),
                   OVERLAPPING, axis)


def equal_count_bands(dataset, k, cases_only=True):
    """Annuli holding (nearly) equal numbers of unordered pairs.

    Boundaries sit at midpoints between adjacent order statistics of the pair
    distances, so no observed distance falls on a boundary unless distances
    are tied.  The last band ends just above the largest distance.
    """
    from .pairing import pair_distances

    if int(k) != k or k < 1:
        raise errors.NonPositiveArguments(f"k must be a positive integer, got {k}")
    k = int(k)
    ds = dataset.cases_only() if cases_only else dataset
    d = np.sort(pair_distances(ds))
    if len(np.unique(d)) < k or len(d) < k:
        raise errors.TooFewPairs(f"{len(d)} pairs ({len(np.unique(d))} distinct) cannot fill {k} bands")
    m = len(d)
    edges = [0.0]
    for q in range(1, k):
        c = (m * q) // k
        edges.append(0.5 * (d[c - 1] + d[c]))
    edges.append(float(np.nextafter(d[-1], np.inf)))
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise errors.TooFewPairs("tied pair distances prevent equal-count boundaries")
    return BandSet(tuple(Band(a, b) for a, b in zip(edges, edges[1:])), EQUAL_COUNT)


def default_d_max(dataset, cases_only=True):
    """Half the largest pairwise distance."""
    from .pairing import pair_distances

    ds = dataset.cases_only() if cases_only else dataset
    return 0.5 * float(np.max(pair_distances(ds)))


def parse_band_spec(spec, dataset=None, axis=DISTANCE):
    """Parse the CLI mini-grammar.

    ``width:D:K`` (``D`` may be ``auto``), ``discs:c1,c2,...``, ``eqcount:K``,
    ``overlap:c1,c2,...:H``.
    """
    try:
        style, _, rest = spec.partition(":")
        parts = rest.split(":")
        if style == "width":
            d_max, k = parts
            if d_max == "auto":
                if dataset is None:
                    raise errors.ConfigError("width:auto needs a dataset")
                d_max = default_d_max(dataset)
            return equal_width_bands(float(d_max), int(k), axis)
        if style == "discs":
            (cuts,) = parts
            return expanding_discs([float(c) for c in cuts.split(",")], axis)
        if style == "eqcount":
            (k,) = parts
            if dataset is None:
                raise errors.ConfigError("eqcount needs a dataset")
            return equal_count_bands(dataset, int(k))
        if style == "overlap":
            centers, h = parts
            return overlapping_bands([float(c) for c in centers.split(",")], float(h), axis)
    except ValueError as exc:
        if isinstance(exc, errors.TauKitError):
            raise
        raise errors.ConfigError(f"cannot parse band spec {spec!r}: {exc}") from None
    raise errors.ConfigError(f"unknown band style in {spec!r}")
