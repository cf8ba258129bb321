"""Cumulative dose-volume histograms and the usual D_x / V_x indices.

D_x is the minimum dose received by the hottest x% of a structure; V_x is
the percentage of the structure receiving at least x Gy.  Every voxel
carries equal weight.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyStructure, GeometryError

DEFAULT_BIN_WIDTH = 0.05


@dataclass(frozen=True, eq=False)
class DvhCurve:
    structure: str
    bin_edges: np.ndarray
    cum_volume_pct: np.ndarray
    voxel_count: int
    bin_width: float
    min_dose: float
    max_dose: float

    def to_csv(self):
        buf = io.StringIO()
        buf.write("dose_gy,cum_volume_pct\n")
        for e, v in zip(self.bin_edges, self.cum_volume_pct):
            buf.write(f"{e:.6f},{v:.6f}\n")
        return buf.getvalue()


@dataclass
class DvhIndices:
    structure: str
    d95: float
    d98: float
    min_dose: float
    max_dose: float
    mean_dose: float
    v_levels: dict = field(default_factory=dict)

    def as_dict(self):
        out = {
            "D95": self.d95,
            "D98": self.d98,
            "min_dose": self.min_dose,
            "max_dose": self.max_dose,
            "mean_dose": self.mean_dose,
        }
        for level, vol in self.v_levels.items():
            out[f"V{_level_name(level)}"] = vol
        return out


def _level_name(level):
    level = float(level)
    return str(int(level)) if level == int(level) else repr(level)


def masked_doses(dose, mask):
    if dose.values.shape != mask.values.shape or not mask.same_geometry(dose):
        raise GeometryError(f"mask {mask.name!r} does not share the dose grid geometry")
    doses = dose.values[mask.values]
    if doses.size == 0:
        raise EmptyStructure(f"structure {mask.name!r} is empty")
    return doses


def compute_dvh(dose, mask, bin_width=DEFAULT_BIN_WIDTH):
    """Cumulative DVH of the masked voxels on a uniform dose grid of ``bin_width`` Gy."""
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    d = masked_doses(dose, mask)
    w = float(bin_width)
    dmin, dmax = float(d.min()), float(d.max())
    first = math.floor(min(dmin, 0.0) / w)
    last = math.floor(dmax / w) + 1
    edges = np.arange(first, last + 1) * w

    # bin index b such that edges[b] <= dose < edges[b + 1], robust to round-off in d / w
    b = np.floor(d / w).astype(np.int64) - first
    b = np.clip(b, 0, len(edges) - 1)
    b -= (d < edges[b]).astype(np.int64)
    nxt = np.minimum(b + 1, len(edges) - 1)
    b += ((d >= edges[nxt]) & (nxt > b)).astype(np.int64)
    counts = np.bincount(b, minlength=len(edges))
    at_least = np.cumsum(counts[::-1])[::-1]
    cum = 100.0 * at_least / d.size
    return DvhCurve(mask.name, edges, cum, int(d.size), w, dmin, dmax)


def dose_at_volume(curve, volume_pct):
    """D_x: dose covering the hottest ``volume_pct`` percent, interpolated between edges."""
    v = float(volume_pct)
    if not 0 < v <= 100:
        raise ValueError(f"volume_pct must lie in (0, 100], got {v}")
    cum = curve.cum_volume_pct
    i = int(np.searchsorted(-cum, -v, side="right")) - 1
    i = max(i, 0)
    if i >= len(cum) - 1:
        d = float(curve.bin_edges[-1])
    else:
        hi, lo = cum[i], cum[i + 1]
        frac = (hi - v) / (hi - lo) if hi > lo else 0.0
        d = float(curve.bin_edges[i] + frac * curve.bin_width)
    return min(max(d, curve.min_dose), curve.max_dose)


def volume_at_dose(curve, dose_gy):
    """V_x: percent of the structure receiving at least ``dose_gy``."""
    x = float(dose_gy)
    if x < 0:
        raise ValueError("dose must be nonnegative")
    return float(np.interp(x, curve.bin_edges, curve.cum_volume_pct, left=100.0, right=0.0))


def structure_minmaxmean(dose, mask):
    d = masked_doses(dose, mask)
    return float(d.min()), float(d.max()), math.fsum(d.tolist()) / d.size


def dvh_indices(dose, mask, levels=(), bin_width=DEFAULT_BIN_WIDTH):
    """Curve plus D95, D98, min/max/mean and V at each requested dose level."""
    curve = compute_dvh(dose, mask, bin_width)
    dmin, dmax, dmean = structure_minmaxmean(dose, mask)
    idx = DvhIndices(
        structure=mask.name,
        d95=dose_at_volume(curve, 95.0),
        d98=dose_at_volume(curve, 98.0),
        min_dose=dmin,
        max_dose=dmax,
        mean_dose=dmean,
        v_levels={float(lv): volume_at_dose(curve, lv) for lv in levels},
    )
    return curve, idx


# -- exact references ---------------------------------------------------------------


def exact_dose_at_volume(doses, volume_pct):
    """Sort-based D_x over raw voxel doses (no binning)."""
    d = np.sort(np.asarray(doses, dtype=np.float64).ravel())[::-1]
    k = max(1, math.ceil(volume_pct / 100.0 * d.size - 1e-9))
    return float(d[min(k, d.size) - 1])


def exact_volume_at_dose(doses, dose_gy):
    d = np.asarray(doses, dtype=np.float64).ravel()
    return 100.0 * np.count_nonzero(d >= dose_gy) / d.size
