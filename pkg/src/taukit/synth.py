"""Synthetic case data: a complete-spatial-randomness null and a spatial
branching-process epidemic."""

from __future__ import annotations

import heapq
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import errors
from .model import CASE, NONCASE, CaseDataset, Individual, write_case_data

SEROTYPES = ("DENV1", "DENV2", "DENV3", "DENV4")


class ExtinctEpidemic(UserWarning):
    """The simulated epidemic stayed small (final size < 10 x initial cases)."""


def _rng(seed):
    return np.random.Generator(np.random.Philox(int(seed)))


def simulate_null(n, region=(0.0, 0.0, 1000.0, 1000.0), time_horizon=365.0, seed=0):
    """``n`` cases with uniform locations, uniform onset times and random serotypes."""
    if n < 2:
        raise errors.ConfigError(f"need n >= 2, got {n}")
    x0, y0, x1, y1 = region
    rng = _rng(seed)
    x = rng.uniform(x0, x1, n)
    y = rng.uniform(y0, y1, n)
    t = rng.uniform(0.0, time_horizon, n)
    sero = rng.integers(0, len(SEROTYPES), n)
    inds = tuple(Individual(f"n{k}", x[k], y[k], t[k], CASE, {"serotype": SEROTYPES[sero[k]]})
                 for k in range(n))
    return CaseDataset(inds)


@dataclass(frozen=True)
class EpidemicConfig:
    """Parameters of the branching-process simulator.

    ``layout`` is ``"uniform"`` or ``"clustered"`` (``cluster_count`` centres,
    Gaussian scatter ``cluster_sd``).  ``kernel`` is ``"gaussian"`` (sd =
    ``kernel_scale``), ``"exponential"`` (rate = ``kernel_scale``) or
    ``"uniform_disc"`` (radius = ``kernel_scale``).  ``observation`` is
    ``"full"``, ``"random_fraction"`` (keep each case with ``observe_p``) or
    ``"spatial_bias"`` (``p_in`` within ``bias_radius`` of ``bias_center``,
    ``p_out`` elsewhere).  Initial cases have onsets uniform on
    ``[0, seed_window]``.
    """

    region: tuple = (0.0, 0.0, 2000.0, 2000.0)
    population_n: int = 4000
    layout: str = "uniform"
    cluster_count: int = 10
    cluster_sd: float = 100.0
    kernel: str = "gaussian"
    kernel_scale: float = 100.0
    serial_interval_mean: float = 15.0
    serial_interval_sd: float = 5.0
    R_e: float = 2.0
    initial_cases: int = 5
    seed_window: float = 0.0
    horizon: float = 120.0
    max_cases: int = 1500
    observation: str = "full"
    observe_p: float = 1.0
    bias_center: tuple = (1000.0, 1000.0)
    bias_radius: float = 500.0
    p_in: float = 1.0
    p_out: float = 0.2
    noncase_fraction: float = 0.0

    def __post_init__(self):
        x0, y0, x1, y1 = self.region
        if not (x1 > x0 and y1 > y0):
            raise errors.ConfigError("region must have positive extent")
        for name in ("population_n", "kernel_scale", "serial_interval_mean",
                     "serial_interval_sd", "initial_cases", "horizon", "max_cases"):
            if not getattr(self, name) > 0:
                raise errors.ConfigError(f"{name} must be positive")
        if self.seed_window < 0 or self.seed_window > self.horizon:
            raise errors.ConfigError("seed_window must lie in [0, horizon]")
        if self.R_e < 0:
            raise errors.ConfigError("R_e must be non-negative")
        if self.layout not in ("uniform", "clustered"):
            raise errors.ConfigError(f"unknown layout {self.layout!r}")
        if self.kernel not in ("gaussian", "exponential", "uniform_disc"):
            raise errors.ConfigError(f"unknown kernel {self.kernel!r}")
        if self.observation not in ("full", "random_fraction", "spatial_bias"):
            raise errors.ConfigError(f"unknown observation model {self.observation!r}")
        for name in ("observe_p", "p_in", "p_out"):
            if not 0 < getattr(self, name) <= 1:
                raise errors.ConfigError(f"{name} must lie in (0, 1]")
        if not 0 <= self.noncase_fraction <= 1:
            raise errors.ConfigError("noncase_fraction must lie in [0, 1]")
        if self.initial_cases > self.population_n:
            raise errors.ConfigError("more initial cases than hosts")


@dataclass
class SimulatedEpidemic:
    """Observed dataset plus ground truth.

    ``full`` holds every case (before observation); ``tree`` lists
    ``(infector_id, infectee_id)`` edges of the true transmission tree.
    """

    dataset: CaseDataset
    full: CaseDataset
    tree: list
    config: EpidemicConfig
    meta: dict = field(default_factory=dict)

    def write(self, cases_path, tree_path=None):
        write_case_data(self.dataset, cases_path)
        if tree_path is not None:
            with open(tree_path, "w", encoding="utf-8") as fh:
                json.dump({"config": asdict(self.config), "meta": self.meta,
                           "tree": [list(e) for e in self.tree]}, fh, indent=1, sort_keys=True)


def _population(cfg, rng):
    x0, y0, x1, y1 = cfg.region
    n = cfg.population_n
    if cfg.layout == "uniform":
        return np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
    centres = np.column_stack([rng.uniform(x0, x1, cfg.cluster_count),
                               rng.uniform(y0, y1, cfg.cluster_count)])
    pts = np.empty((n, 2))
    filled = 0
    while filled < n:
        c = centres[rng.integers(0, cfg.cluster_count, n)]
        cand = c + rng.normal(0.0, cfg.cluster_sd, (n, 2))
        ok = (cand[:, 0] >= x0) & (cand[:, 0] <= x1) & (cand[:, 1] >= y0) & (cand[:, 1] <= y1)
        cand = cand[ok][: n - filled]
        pts[filled:filled + len(cand)] = cand
        filled += len(cand)
    return pts


def _kernel_weights(cfg, d):
    if cfg.kernel == "gaussian":
        return np.exp(-0.5 * (d / cfg.kernel_scale) ** 2)
    if cfg.kernel == "exponential":
        return np.exp(-cfg.kernel_scale * d)
    return (d <= cfg.kernel_scale).astype(float)


def _displace(cfg, rng, k):
    """``k`` offspring displacements drawn from the transmission kernel."""
    if cfg.kernel == "gaussian":
        return rng.normal(0.0, cfg.kernel_scale, (k, 2))
    if cfg.kernel == "exponential":
        r = rng.exponential(1.0 / cfg.kernel_scale, k)
    else:
        r = cfg.kernel_scale * np.sqrt(rng.random(k))
    a = rng.uniform(0.0, 2.0 * np.pi, k)
    return np.column_stack([r * np.cos(a), r * np.sin(a)])


def apply_observation(dataset, cfg: EpidemicConfig, rng):
    """Thin the cases of ``dataset`` with the configured observation model."""
    if cfg.observation == "full":
        return dataset
    keep = []
    for k, ind in enumerate(dataset.individuals):
        if not ind.is_case:
            keep.append(k)
            continue
        if cfg.observation == "random_fraction":
            p = cfg.observe_p
        else:
            dx, dy = ind.x - cfg.bias_center[0], ind.y - cfg.bias_center[1]
            p = cfg.p_in if dx * dx + dy * dy <= cfg.bias_radius ** 2 else cfg.p_out
        if rng.random() < p:
            keep.append(k)
    return dataset.subset(keep)


def simulate_epidemic(config: EpidemicConfig, seed=0):
    """Spatial branching process.

    Each case draws ``Poisson(R_e)`` offspring with gamma-distributed onset
    delays.  Under the uniform layout an offspring sits at its infector's
    location plus a kernel displacement; under the clustered layout it sits
    at a host drawn with probability proportional to the kernel of its
    distance from the infector.  Offspring outside the region or after
    ``horizon`` are dropped, and generation stops at ``max_cases``.  The
    observation model is applied last.
    """
    cfg = config
    rng = _rng(seed)
    x0, y0, x1, y1 = cfg.region
    hosts = _population(cfg, rng) if cfg.layout == "clustered" else None
    shape = (cfg.serial_interval_mean / cfg.serial_interval_sd) ** 2
    scale = cfg.serial_interval_sd ** 2 / cfg.serial_interval_mean

    xs, ys, ts, parent = [], [], [], []
    heap = []
    if hosts is None:
        start = np.column_stack([rng.uniform(x0, x1, cfg.initial_cases),
                                 rng.uniform(y0, y1, cfg.initial_cases)])
    else:
        start = hosts[rng.choice(len(hosts), cfg.initial_cases, replace=False)]
    for k in range(cfg.initial_cases):
        t0 = rng.uniform(0.0, cfg.seed_window) if cfg.seed_window > 0 else 0.0
        xs.append(float(start[k, 0])); ys.append(float(start[k, 1]))
        ts.append(t0); parent.append(-1)
        heapq.heappush(heap, (t0, k))
    while heap and len(ts) < cfg.max_cases:
        t, i = heapq.heappop(heap)
        k = int(rng.poisson(cfg.R_e))
        if k == 0:
            continue
        delays = rng.gamma(shape, scale, size=k)
        if hosts is None:
            pts = np.array([xs[i], ys[i]]) + _displace(cfg, rng, k)
        else:
            w = _kernel_weights(cfg, np.hypot(hosts[:, 0] - xs[i], hosts[:, 1] - ys[i]))
            total = w.sum()
            if total <= 0:
                continue
            pts = hosts[rng.choice(len(hosts), size=k, p=w / total)]
        for (px, py), dt in zip(pts, delays):
            tj = t + dt
            if tj > cfg.horizon or not (x0 <= px <= x1 and y0 <= py <= y1):
                continue
            if len(ts) >= cfg.max_cases:
                break
            xs.append(float(px)); ys.append(float(py)); ts.append(float(tj)); parent.append(i)
            heapq.heappush(heap, (tj, len(ts) - 1))

    n_cases = len(ts)
    if n_cases < 10 * cfg.initial_cases:
        warnings.warn(f"epidemic reached only {n_cases} cases", ExtinctEpidemic, stacklevel=2)
    if n_cases < 2:
        raise errors.FewerThanTwoCases(f"epidemic produced {n_cases} case(s); reseed")
    order = np.argsort(np.asarray(ts), kind="stable")
    inds = [Individual(f"c{k}", xs[k], ys[k], ts[k], CASE) for k in order]
    if cfg.noncase_fraction > 0:
        n_non = int(rng.binomial(max(cfg.population_n - n_cases, 0), cfg.noncase_fraction))
        if hosts is None:
            pts = np.column_stack([rng.uniform(x0, x1, n_non), rng.uniform(y0, y1, n_non)])
        else:
            pts = hosts[rng.choice(len(hosts), n_non)]
        inds += [Individual(f"u{k}", pts[k, 0], pts[k, 1], None, NONCASE) for k in range(n_non)]
    full = CaseDataset(tuple(inds))
    observed = apply_observation(full, cfg, rng)
    tree = [(f"c{parent[k]}", f"c{k}") for k in range(n_cases) if parent[k] >= 0]
    meta = {"seed": int(seed), "final_size": int(n_cases),
            "serial_interval": {"family": "gamma", "mean": cfg.serial_interval_mean,
                                "sd": cfg.serial_interval_sd}}
    return SimulatedEpidemic(observed, full, tree, cfg, meta)
