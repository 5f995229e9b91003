"""Domain types, CSV ingestion and validation.

Case data (for the odds and prevalence estimators) is a :class:`CaseDataset`
of :class:`Individual` records.  Cohort data with enrollment windows and
repeated disease episodes (for the rate estimator) is an
:class:`EpisodePanel`.  Both are immutable once built; all validation happens
in the constructors, so any instance that exists is valid.
"""

from __future__ import annotations

import csv
import datetime as _dt
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional

import numpy as np

from . import errors

CASE = "case"
NONCASE = "noncase"
PLANAR = "planar"
GEOGRAPHIC = "geographic"

EARTH_RADIUS_M = 6_371_008.8

CASE_COLUMNS = ("id", "x", "y", "t", "status")
PERSON_COLUMNS = ("id", "entry", "exit", "x", "y")
RELOCATION_COLUMNS = ("id", "from_t", "x", "y")
EPISODE_COLUMNS = ("person_id", "onset", "recovery")

_STATUS_ALIASES = {
    "case": CASE, "1": CASE, "true": CASE, "yes": CASE,
    "noncase": NONCASE, "non-case": NONCASE, "control": NONCASE,
    "0": NONCASE, "false": NONCASE, "no": NONCASE,
}


def _row(index):
    # CSV row number of record `index` (header is row 1)
    return index + 2


def _check_location(x, y, crs_mode, row):
    if not (math.isfinite(x) and math.isfinite(y)):
        raise errors.NonFiniteCoordinate(f"location ({x}, {y}) is not finite", row=row)
    if crs_mode == GEOGRAPHIC and not (-180.0 <= x <= 180.0 and -90.0 <= y <= 90.0):
        raise errors.NonFiniteCoordinate(
            f"lon/lat ({x}, {y}) outside [-180,180]x[-90,90]", row=row)


@dataclass(frozen=True)
class Individual:
    """A geolocated, status-marked individual.

    ``x``/``y`` are metres in planar mode and lon/lat degrees in geographic
    mode.  ``t`` is the onset time as a day offset (``None`` for non-cases
    without a recorded time).
    """

    id: str
    x: float
    y: float
    t: Optional[float] = None
    status: str = CASE
    marks: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        if self.t is not None:
            object.__setattr__(self, "t", float(self.t))
        status = _STATUS_ALIASES.get(str(self.status).strip().lower())
        if status is None:
            raise errors.DataError(f"unknown status {self.status!r}")
        object.__setattr__(self, "status", status)
        object.__setattr__(self, "marks", MappingProxyType(dict(self.marks)))

    @property
    def is_case(self):
        return self.status == CASE


@dataclass(frozen=True)
class CaseDataset:
    """Immutable collection of individuals used by the odds/prevalence estimators.

    Parameters
    ----------
    individuals : sequence of Individual
    crs_mode : {"planar", "geographic"}
        Euclidean distances in metres, or great-circle distances on a sphere
        of radius 6 371 008.8 m from lon/lat degrees.
    time_unit : str
        Label only; every computation uses time differences.
    implicit_relatedness : bool
        When True, cases may lack onset times (relatedness comes from marks,
        e.g. prevalent/incident status).
    """

    individuals: tuple
    crs_mode: str = PLANAR
    time_unit: str = "days"
    implicit_relatedness: bool = False

    def __post_init__(self):
        inds = tuple(self.individuals)
        object.__setattr__(self, "individuals", inds)
        if self.crs_mode not in (PLANAR, GEOGRAPHIC):
            raise errors.ConfigError(f"unknown crs_mode {self.crs_mode!r}")
        seen = {}
        for k, ind in enumerate(inds):
            row = _row(k)
            if ind.id in seen:
                raise errors.DuplicateId(
                    f"id {ind.id!r} already used on row {_row(seen[ind.id])}", row=row)
            seen[ind.id] = k
            _check_location(ind.x, ind.y, self.crs_mode, row)
            if ind.t is not None and not math.isfinite(ind.t):
                raise errors.NonFiniteTime(f"onset time {ind.t} is not finite", row=row)
            if ind.is_case and ind.t is None and not self.implicit_relatedness:
                raise errors.NonFiniteTime("case has no onset time", row=row)
        n_cases = sum(ind.is_case for ind in inds)
        if n_cases < 2:
            raise errors.FewerThanTwoCases(f"dataset has {n_cases} case(s); need at least 2")

    def __len__(self):
        return len(self.individuals)

    @cached_property
    def ids(self):
        return tuple(ind.id for ind in self.individuals)

    @cached_property
    def coords(self):
        a = np.array([(ind.x, ind.y) for ind in self.individuals], dtype=float)
        a.setflags(write=False)
        return a

    @cached_property
    def times(self):
        """Onset times, NaN where absent."""
        a = np.array([np.nan if ind.t is None else ind.t for ind in self.individuals])
        a.setflags(write=False)
        return a

    @cached_property
    def is_case(self):
        a = np.array([ind.is_case for ind in self.individuals], dtype=bool)
        a.setflags(write=False)
        return a

    @property
    def n_cases(self):
        return int(self.is_case.sum())

    @cached_property
    def mark_names(self):
        names = []
        for ind in self.individuals:
            for k in ind.marks:
                if k not in names:
                    names.append(k)
        return tuple(names)

    def mark_codes(self, name):
        """Integer-code a categorical mark; -1 where the mark is absent."""
        table = {}
        out = np.full(len(self.individuals), -1, dtype=np.int64)
        for k, ind in enumerate(self.individuals):
            v = ind.marks.get(name)
            if v is None or v == "":
                continue
            out[k] = table.setdefault(v, len(table))
        return out

    def cases_only(self):
        """The subset of cases, preserving order."""
        return self.subset(np.flatnonzero(self.is_case))

    def subset(self, indices):
        return CaseDataset(
            tuple(self.individuals[int(k)] for k in indices),
            crs_mode=self.crs_mode, time_unit=self.time_unit,
            implicit_relatedness=self.implicit_relatedness)

    def with_times(self, times):
        """Copy with onset times replaced (NaN means absent)."""
        inds = tuple(
            Individual(ind.id, ind.x, ind.y, None if np.isnan(t) else float(t), ind.status, ind.marks)
            for ind, t in zip(self.individuals, times))
        return CaseDataset(inds, self.crs_mode, self.time_unit, self.implicit_relatedness)

    @classmethod
    def from_arrays(cls, x, y, t=None, status=None, ids=None, marks=None, **kwargs):
        """Build a dataset from parallel arrays (convenience for numeric work)."""
        n = len(x)
        if ids is None:
            ids = [str(k) for k in range(n)]
        if t is None:
            t = [None] * n
        if status is None:
            status = [CASE] * n
        marks = marks or {}
        inds = []
        for k in range(n):
            tk = t[k]
            if tk is not None and not isinstance(tk, str) and np.isnan(tk):
                tk = None
            mk = {name: str(vals[k]) for name, vals in marks.items() if vals[k] not in (None, "")}
            inds.append(Individual(ids[k], x[k], y[k], tk, status[k], mk))
        return cls(tuple(inds), **kwargs)


@dataclass(frozen=True)
class Episode:
    person_id: str
    onset: float
    recovery: float

    def __post_init__(self):
        object.__setattr__(self, "person_id", str(self.person_id))
        object.__setattr__(self, "onset", float(self.onset))
        object.__setattr__(self, "recovery", float(self.recovery))


@dataclass(frozen=True)
class Person:
    """An enrolled person with a piecewise-constant location track.

    ``track`` is a tuple of ``(from_day, x, y)`` records; the person is at
    ``(x, y)`` from ``from_day`` until the next record's day.
    """

    id: str
    entry: float
    exit: float
    track: tuple

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "entry", float(self.entry))
        object.__setattr__(self, "exit", float(self.exit))
        object.__setattr__(
            self, "track", tuple((float(d), float(x), float(y)) for d, x, y in self.track))

    @classmethod
    def static(cls, id, entry, exit, x, y):
        return cls(id, entry, exit, ((entry, x, y),))

    def location_at(self, t):
        days = [rec[0] for rec in self.track]
        k = max(0, int(np.searchsorted(days, t, side="right")) - 1)
        return self.track[k][1], self.track[k][2]


def _parse_window(window):
    if window in (None, "recovery", "use_recovery"):
        return None
    if isinstance(window, str) and window.startswith("fixed:"):
        window = window.split(":", 1)[1]
    w = float(window)
    if not (w > 0 and math.isfinite(w)):
        raise errors.ConfigError(f"fixed infectious duration must be positive, got {window!r}")
    return w


@dataclass(frozen=True)
class EpisodePanel:
    """Cohort of persons with enrollment windows and disease episodes.

    Parameters
    ----------
    persons, episodes : sequences
    immunizing : bool
        If True a person is never susceptible again after their first onset.
    infectious_window : None or float
        ``None`` uses ``[onset, recovery]``; a number ``L`` uses
        ``[onset, onset + L]``.
    susceptibility_delay : float
        Days after recovery before a non-immunized person is susceptible again.
    """

    persons: tuple
    episodes: tuple
    immunizing: bool = False
    infectious_window: Optional[float] = None
    susceptibility_delay: float = 0.0
    crs_mode: str = PLANAR

    def __post_init__(self):
        persons = tuple(self.persons)
        episodes = tuple(self.episodes)
        object.__setattr__(self, "persons", persons)
        object.__setattr__(self, "episodes", episodes)
        object.__setattr__(self, "infectious_window", _parse_window(self.infectious_window))
        if self.susceptibility_delay < 0:
            raise errors.ConfigError("susceptibility_delay must be non-negative")
        index = {}
        for k, p in enumerate(persons):
            row = _row(k)
            if p.id in index:
                raise errors.DuplicateId(f"person id {p.id!r} repeated", row=row)
            index[p.id] = k
            if not (math.isfinite(p.entry) and math.isfinite(p.exit)) or p.entry > p.exit:
                raise errors.InvalidPerson(f"entry {p.entry} / exit {p.exit} invalid", row=row)
            if not p.track:
                raise errors.InvalidPerson("empty location track", row=row)
            days = [rec[0] for rec in p.track]
            if any(b <= a for a, b in zip(days, days[1:])):
                raise errors.InvalidPerson("track days must increase strictly", row=row)
            if days[0] > p.entry:
                raise errors.InvalidPerson("first track day is after entry", row=row)
            for _, x, y in p.track:
                _check_location(x, y, self.crs_mode, row)
        by_person = {}
        for k, e in enumerate(episodes):
            row = _row(k)
            if e.person_id not in index:
                raise errors.UnknownPersonId(f"unknown person {e.person_id!r}", row=row)
            if not (math.isfinite(e.onset) and math.isfinite(e.recovery)):
                raise errors.NonFiniteTime("episode times must be finite", row=row)
            if e.onset > e.recovery:
                raise errors.InvalidEpisode(
                    f"onset {e.onset} is after recovery {e.recovery}", row=row)
            p = persons[index[e.person_id]]
            if e.onset < p.entry or e.recovery > p.exit:
                raise errors.EpisodeOutsideEnrollment(
                    f"episode [{e.onset}, {e.recovery}] outside enrollment "
                    f"[{p.entry}, {p.exit}] of {p.id!r}", row=row)
            by_person.setdefault(e.person_id, []).append((e.onset, e.recovery, k))
        for eps in by_person.values():
            eps.sort()
            for (_, r0, _), (o1, _, k1) in zip(eps, eps[1:]):
                if o1 <= r0:
                    raise errors.OverlappingEpisodes(
                        "episode overlaps an earlier episode of the same person", row=_row(k1))
        object.__setattr__(self, "_index", index)

    @property
    def n_episodes(self):
        return len(self.episodes)

    @property
    def n_at_risk(self):
        return len(self.persons)

    def person(self, person_id):
        return self.persons[self._index[person_id]]

    def person_index(self, person_id):
        return self._index[person_id]

    @cached_property
    def episodes_by_person(self):
        """Tuple (one entry per person) of that person's episodes sorted by onset."""
        out = [[] for _ in self.persons]
        for e in self.episodes:
            out[self._index[e.person_id]].append(e)
        return tuple(tuple(sorted(es, key=lambda e: e.onset)) for es in out)

    def infectious_end(self, episode):
        if self.infectious_window is None:
            return episode.recovery
        return episode.onset + self.infectious_window

    def subset_persons(self, indices):
        """Panel restricted to the given person positions (with their episodes)."""
        keep = [self.persons[int(k)] for k in indices]
        ids = {p.id for p in keep}
        return EpisodePanel(
            tuple(keep), tuple(e for e in self.episodes if e.person_id in ids),
            self.immunizing, self.infectious_window, self.susceptibility_delay, self.crs_mode)


# ---------------------------------------------------------------------------
# relatedness rules

TEMPORAL = "temporal_interval"
MARK_EQUALITY = "mark_equality"
PREVALENT_INCIDENT = "prevalent_incident"
CONJUNCTION = "conjunction"


@dataclass(frozen=True)
class RelatednessRule:
    """Predicate deciding whether a pair is plausibly transmission-related.

    Build with the classmethods: :meth:`temporal`, :meth:`mark`,
    :meth:`prevalent`, :meth:`all_of`.
    """

    kind: str
    t1: float = 0.0
    t2: float = 0.0
    mark_name: str = ""
    rules: tuple = ()

    def __post_init__(self):
        if self.kind == TEMPORAL:
            if not (math.isfinite(self.t1) and math.isfinite(self.t2)) or self.t1 > self.t2 or self.t1 < 0:
                raise errors.InvalidRule(f"temporal interval needs 0 <= T1 <= T2, got [{self.t1}, {self.t2}]")
        elif self.kind in (MARK_EQUALITY, PREVALENT_INCIDENT):
            if not self.mark_name:
                raise errors.InvalidRule(f"{self.kind} needs a mark name")
        elif self.kind == CONJUNCTION:
            if not self.rules:
                raise errors.InvalidRule("conjunction must contain at least one rule")
        else:
            raise errors.InvalidRule(f"unknown rule kind {self.kind!r}")

    @classmethod
    def temporal(cls, t1, t2):
        return cls(TEMPORAL, t1=float(t1), t2=float(t2))

    @classmethod
    def mark(cls, name):
        return cls(MARK_EQUALITY, mark_name=name)

    @classmethod
    def prevalent(cls, name="prevalent"):
        return cls(PREVALENT_INCIDENT, mark_name=name)

    @classmethod
    def all_of(cls, *rules):
        return cls(CONJUNCTION, rules=tuple(rules))

    @property
    def uses_time(self):
        if self.kind == TEMPORAL:
            return True
        return self.kind == CONJUNCTION and any(r.uses_time for r in self.rules)

    def leaves(self):
        if self.kind == CONJUNCTION:
            for r in self.rules:
                yield from r.leaves()
        else:
            yield self

    def describe(self):
        if self.kind == TEMPORAL:
            return f"[{self.t1:g}, {self.t2:g}]"
        if self.kind == MARK_EQUALITY:
            return f"same {self.mark_name}"
        if self.kind == PREVALENT_INCIDENT:
            return f"prevalent/incident ({self.mark_name})"
        return " & ".join(r.describe() for r in self.rules)

    def to_dict(self):
        if self.kind == TEMPORAL:
            return {"kind": self.kind, "T1": self.t1, "T2": self.t2}
        if self.kind == CONJUNCTION:
            return {"kind": self.kind, "rules": [r.to_dict() for r in self.rules]}
        return {"kind": self.kind, "mark": self.mark_name}

    @classmethod
    def parse(cls, spec):
        """Parse ``"0:5"``, ``"mark:serotype"``, ``"prevalent[:name]"`` joined by ``+``."""
        parts = [p.strip() for p in str(spec).split("+") if p.strip()]
        if not parts:
            raise errors.InvalidRule(f"empty relatedness spec {spec!r}")
        rules = []
        for p in parts:
            if p.startswith("mark:"):
                rules.append(cls.mark(p[5:]))
            elif p == "prevalent" or p.startswith("prevalent:"):
                rules.append(cls.prevalent(p.split(":", 1)[1] if ":" in p else "prevalent"))
            else:
                try:
                    a, b = p.split(":")
                    rules.append(cls.temporal(float(a), float(b)))
                except ValueError:
                    raise errors.InvalidRule(f"cannot parse relatedness term {p!r}") from None
        return rules[0] if len(rules) == 1 else cls.all_of(*rules)


# ---------------------------------------------------------------------------
# CSV ingestion

def _read_csv(path, required):
    path = Path(path)
    if not path.exists():
        raise errors.DataError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        for col in required:
            if col not in header:
                raise errors.MissingColumn(f"{path.name}: missing column {col!r}", row=1)
        reader.fieldnames = header
        rows = [{k: (v or "").strip() for k, v in r.items() if k is not None} for r in reader]
    return header, rows


def _float(value, row, what, exc=errors.DataError):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise exc(f"{what} {value!r} is not a number", row=row) from None
    return v


def parse_times(values, rows=None):
    """Parse numeric day offsets or ISO-8601 dates.

    Dates become day offsets relative to the earliest date in ``values``.
    Empty strings map to ``None``.
    """
    rows = rows or [_row(k) for k in range(len(values))]
    present = [v for v in values if v != ""]
    try:
        [float(v) for v in present]
        numeric = True
    except ValueError:
        numeric = False
    if numeric:
        out = []
        for v, r in zip(values, rows):
            if v == "":
                out.append(None)
                continue
            f = float(v)
            if not math.isfinite(f):
                raise errors.NonFiniteTime(f"time {v!r} is not finite", row=r)
            out.append(f)
        return out
    parsed = []
    for v, r in zip(values, rows):
        if v == "":
            parsed.append(None)
            continue
        try:
            parsed.append(_dt.datetime.fromisoformat(v))
        except ValueError:
            raise errors.NonFiniteTime(f"time {v!r} is neither a number nor an ISO date", row=r) from None
    origin = min(p for p in parsed if p is not None)
    return [None if p is None else (p - origin).total_seconds() / 86400.0 for p in parsed]


def load_case_data(path, crs_mode=PLANAR, time_unit="days", implicit_relatedness=False,
                   mark_columns=None):
    """Read a cases CSV (``id,x,y,t,status[,marks...]``) into a :class:`CaseDataset`.

    Any column other than the five required ones is read as a categorical
    mark unless ``mark_columns`` restricts the set.  Row order is preserved.
    """
    header, rows = _read_csv(path, CASE_COLUMNS)
    extra = [h for h in header if h not in CASE_COLUMNS]
    if mark_columns is not None:
        missing = [m for m in mark_columns if m not in header]
        if missing:
            raise errors.MissingColumn(f"missing mark column(s) {missing}", row=1)
        extra = list(mark_columns)
    times = parse_times([r["t"] for r in rows])
    inds = []
    for k, r in enumerate(rows):
        row = _row(k)
        x = _float(r["x"], row, "x", errors.NonFiniteCoordinate)
        y = _float(r["y"], row, "y", errors.NonFiniteCoordinate)
        marks = {m: r[m] for m in extra if r.get(m, "") != ""}
        try:
            inds.append(Individual(r["id"], x, y, times[k], r["status"], marks))
        except errors.DataError as exc:
            raise errors.DataError(str(exc), row=row) from None
    return CaseDataset(tuple(inds), crs_mode=crs_mode, time_unit=time_unit,
                       implicit_relatedness=implicit_relatedness)


def write_case_data(dataset, path):
    """Write a dataset in the cases CSV format; ``load_case_data`` reverses it."""
    marks = list(dataset.mark_names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CASE_COLUMNS) + marks)
        for ind in dataset.individuals:
            t = "" if ind.t is None else repr(ind.t)
            w.writerow([ind.id, repr(ind.x), repr(ind.y), t, ind.status]
                       + [ind.marks.get(m, "") for m in marks])


def load_episode_panel(persons_path, episodes_path, relocations_path=None, *,
                       immunizing=False, infectious_window=None, susceptibility_delay=0.0,
                       crs_mode=PLANAR):
    """Read persons/episodes (and optional relocations) CSVs into an :class:`EpisodePanel`."""
    _, prow = _read_csv(persons_path, PERSON_COLUMNS)
    _, erow = _read_csv(episodes_path, EPISODE_COLUMNS)
    ptimes = parse_times([r["entry"] for r in prow] + [r["exit"] for r in prow])
    entries, exits = ptimes[:len(prow)], ptimes[len(prow):]
    tracks = {}
    for k, r in enumerate(prow):
        row = _row(k)
        if entries[k] is None or exits[k] is None:
            raise errors.InvalidPerson("entry and exit are required", row=row)
        tracks[r["id"]] = [(entries[k], _float(r["x"], row, "x", errors.NonFiniteCoordinate),
                            _float(r["y"], row, "y", errors.NonFiniteCoordinate))]
    if relocations_path is not None:
        _, rrow = _read_csv(relocations_path, RELOCATION_COLUMNS)
        rtimes = parse_times([r["from_t"] for r in rrow])
        for k, r in enumerate(rrow):
            row = _row(k)
            if r["id"] not in tracks:
                raise errors.UnknownPersonId(f"relocation for unknown person {r['id']!r}", row=row)
            tracks[r["id"]].append((rtimes[k], _float(r["x"], row, "x", errors.NonFiniteCoordinate),
                                    _float(r["y"], row, "y", errors.NonFiniteCoordinate)))
    persons = []
    for k, r in enumerate(prow):
        tr = sorted(tracks[r["id"]], key=lambda rec: rec[0])
        persons.append(Person(r["id"], entries[k], exits[k], tuple(tr)))
    etimes = parse_times([r["onset"] for r in erow] + [r["recovery"] for r in erow])
    episodes = []
    for k, r in enumerate(erow):
        on, rec = etimes[k], etimes[len(erow) + k]
        if on is None or rec is None:
            raise errors.NonFiniteTime("episode onset and recovery are required", row=_row(k))
        episodes.append(Episode(r["person_id"], on, rec))
    return EpisodePanel(tuple(persons), tuple(episodes), immunizing=immunizing,
                        infectious_window=infectious_window,
                        susceptibility_delay=susceptibility_delay, crs_mode=crs_mode)


def write_episode_panel(panel, persons_path, episodes_path, relocations_path=None):
    """Write a panel as persons/episodes/relocations CSVs."""
    with open(persons_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PERSON_COLUMNS)
        for p in panel.persons:
            w.writerow([p.id, repr(p.entry), repr(p.exit), repr(p.track[0][1]), repr(p.track[0][2])])
    moves = [(p.id, rec) for p in panel.persons for rec in p.track[1:]]
    if moves and relocations_path is None:
        raise errors.ConfigError("panel has relocations; pass relocations_path")
    if relocations_path is not None:
        with open(relocations_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RELOCATION_COLUMNS)
            for pid, (d, x, y) in moves:
                w.writerow([pid, repr(d), repr(x), repr(y)])
    with open(episodes_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPISODE_COLUMNS)
        for e in panel.episodes:
            w.writerow([e.person_id, repr(e.onset), repr(e.recovery)])


def as_case_dataset(panel: EpisodePanel, status_from_episodes=True) -> CaseDataset:
    """Collapse a panel of static persons into a case dataset.

    Each person becomes one individual at their first track location; persons
    with episodes are cases with onset at their first episode.
    """
    inds = []
    for p, eps in zip(panel.persons, panel.episodes_by_person):
        t = eps[0].onset if eps else None
        status = CASE if (eps and status_from_episodes) else NONCASE
        inds.append(Individual(p.id, p.track[0][1], p.track[0][2], t, status))
    return CaseDataset(tuple(inds), crs_mode=panel.crs_mode)

