"""Static figures for tau curves and space-time maps.

Figures are written as SVG through matplotlib's non-interactive backend,
with a fixed hash salt and no timestamp so that reruns produce identical
bytes.  Every figure is accompanied by a CSV of exactly the numbers drawn.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import errors  # noqa: E402
from .estimators import TauCurve, TauMap, _fmt  # noqa: E402

CURVES_PER_PANEL = 3
WHISKER_MAX_R = 100

_RC = {
    "svg.hashsalt": "taukit",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


@dataclass(frozen=True)
class CurveSeries:
    """One curve to draw, optionally with an envelope from ``R`` replicates."""

    curve: TauCurve
    label: str = ""
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    R: int = 0


def caption(meta):
    """Caption line naming estimator, envelope, replicates and time window."""
    parts = [f"estimator={meta.get('estimator', '?')}"]
    if meta.get("envelope"):
        parts.append(f"envelope={meta['envelope']}")
    if meta.get("level") is not None:
        parts.append(f"level={meta['level']:g}")
    parts.append(f"R={meta.get('R', 0)}")
    parts.append(f"relatedness={meta.get('relatedness', '?')}")
    return "  ".join(parts)


def _save(fig, path, meta):
    fig.savefig(path, format="svg",
                metadata={"Date": None, "Creator": "taukit", "Title": meta.get("title", "tau"),
                          "Description": caption(meta)})
    plt.close(fig)


def _panels(n):
    return [list(range(k, min(k + CURVES_PER_PANEL, n))) for k in range(0, n, CURVES_PER_PANEL)]


def plot_curves(series, path, data_path, meta=None, log_tau=False, convention="band_end"):
    """Draw tau against distance with a tau = 1 reference line.

    More than three curves spill into vertically stacked panels sharing the
    x axis.  Envelopes are whiskers for small ``R`` and shaded bands
    otherwise.  Undefined bands are gaps.
    """
    meta = dict(meta or {})
    series = list(series)
    if not series or not any(s.curve.defined.any() for s in series):
        raise errors.NothingToPlot("no defined tau values to plot")
    groups = _panels(len(series))
    rows = []
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(len(groups), 1, sharex=True, squeeze=False,
                                 figsize=(6.0, 3.2 * len(groups)))
        x_max = 0.0
        for p, (ax, group) in enumerate(zip(axes[:, 0], groups)):
            for k in group:
                s = series[k]
                x = s.curve.bands.plot_points(convention)
                y = s.curve.values
                finite_x = x[np.isfinite(x)]
                if len(finite_x):
                    x_max = max(x_max, float(finite_x.max()))
                line, = ax.plot(x, y, marker="o", ms=3, lw=1.2, label=s.label or None)
                if s.lo is not None:
                    if s.R and s.R < WHISKER_MAX_R:
                        ok = ~(np.isnan(s.lo) | np.isnan(s.hi))
                        ax.vlines(x[ok], s.lo[ok], s.hi[ok], color=line.get_color(), lw=0.8)
                        ax.plot(np.r_[x[ok], x[ok]], np.r_[s.lo[ok], s.hi[ok]], ls="none",
                                marker="_", ms=5, color=line.get_color())
                    else:
                        ok = ~(np.isnan(s.lo) | np.isnan(s.hi))
                        ax.fill_between(x, s.lo, s.hi, where=ok, color=line.get_color(),
                                        alpha=0.2, lw=0, interpolate=False)
                for b in range(len(x)):
                    rows.append([p, s.label, s.curve.bands[b].lo, s.curve.bands[b].hi, x[b], y[b],
                                 np.nan if s.lo is None else s.lo[b],
                                 np.nan if s.hi is None else s.hi[b]])
            ax.axhline(1.0, color="0.3", lw=0.8, ls="--")
            if log_tau:
                ax.set_yscale("log")
            else:
                ax.set_ylim(bottom=0.0)
            ax.set_ylabel("tau" + (" (log scale)" if log_tau else ""))
            if any(series[k].label for k in group):
                ax.legend(frameon=False)
        axes[-1, 0].set_xlim(0.0, x_max * 1.02 if x_max > 0 else 1.0)
        axes[-1, 0].set_xlabel("distance" + (" (band end)" if convention == "band_end" else " (band midpoint)"))
        axes[0, 0].set_title(caption(meta), fontsize=8)
        fig.tight_layout()
        _save(fig, path, meta)
    _write_rows(data_path, ["panel", "label", "band_lo", "band_hi", "plot_x", "tau", "env_lo", "env_hi"], rows)


def plot_map(tau_map: TauMap, path, data_path, meta=None, log_tau=True):
    """Colour map of tau over distance band (x) by time-lag band (y).

    Low-support cells carry a cross; undefined cells are left blank.
    """
    meta = dict(meta or {})
    cells = np.asarray(tau_map.cells, dtype=float)
    if not np.isfinite(cells).any():
        raise errors.NothingToPlot("no defined cells in the map")
    dx = np.r_[tau_map.distance_bands.lo, tau_map.distance_bands.hi[-1]]
    dy = np.r_[tau_map.time_lag_bands.lo, tau_map.time_lag_bands.hi[-1]]
    shown = np.where(cells > 0, cells, np.nan) if log_tau else cells
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 4.5))
        if log_tau and np.isfinite(shown).any():
            lim = max(abs(math.log10(np.nanmin(shown))), abs(math.log10(np.nanmax(shown))), 0.1)
            norm = matplotlib.colors.LogNorm(10 ** -lim, 10 ** lim)
        else:
            norm = matplotlib.colors.TwoSlopeNorm(1.0, 0.0, max(2.0, float(np.nanmax(cells))))
        mesh = ax.pcolormesh(dx, dy, np.ma.masked_invalid(shown).T, cmap="RdBu_r", norm=norm)
        fig.colorbar(mesh, ax=ax, label="tau")
        a_idx, b_idx = np.nonzero(np.asarray(tau_map.low_support))
        if len(a_idx):
            ax.plot(0.5 * (dx[a_idx] + dx[a_idx + 1]), 0.5 * (dy[b_idx] + dy[b_idx + 1]),
                    "x", color="0.2", ms=4, ls="none", label=f"< {tau_map.min_pairs} related pairs")
            ax.legend(frameon=False, loc="upper right", fontsize=7)
        ax.set_xlabel("distance")
        ax.set_ylabel("time lag")
        ax.set_title(caption(meta), fontsize=8)
        fig.tight_layout()
        _save(fig, path, meta)
    rows = []
    for a, db in enumerate(tau_map.distance_bands):
        for b, tb in enumerate(tau_map.time_lag_bands):
            rows.append([db.lo, db.hi, tb.lo, tb.hi, cells[a, b], bool(tau_map.low_support[a][b])])
    _write_rows(data_path, ["d_lo", "d_hi", "t_lo", "t_hi", "tau", "low_support"], rows)


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
