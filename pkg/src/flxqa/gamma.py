"""3D gamma index between a reference and an evaluated dose grid.

For every reference voxel above the low-dose threshold, gamma is the minimum
over evaluated sample points r' within the search sphere of

    sqrt(|r - r'|^2 / dta^2 + (D_eval(r') - D_ref(r))^2 / dD^2)

The evaluated samples form a lattice refined ``subdivisions`` times per voxel
edge; off-center samples are trilinear interpolants of the evaluated grid.
Two routes are provided: :func:`gamma_index_brute` scans every lattice point,
:func:`gamma_index_fast` walks the same points in order of distance and stops
once the distance term alone cannot beat the running minimum.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .errors import EmptyEvaluation
from .volgrid import Grid3, require_same_geometry, trilinear_index

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

# Pass test slack: (1.03 D - D) / (0.03 D) is not exactly 1 in binary floating point.
PASS_TOLERANCE = 1e-12

# Largest lattice (in nodes) the brute route tabulates up front.
BRUTE_TABLE_LIMIT = 2**24


@dataclass(frozen=True)
class GammaParams:
    dose_criterion_pct: float = 3.0
    dta_mm: float = 3.0
    normalization: str = "global"
    threshold_pct: float = 10.0
    search_radius_factor: float = 3.0
    subdivisions: int = 3

    def __post_init__(self):
        if not self.dose_criterion_pct > 0 or not self.dta_mm > 0:
            raise ValueError("dose criterion and DTA must be positive")
        if self.normalization not in ("global", "local"):
            raise ValueError(f"normalization must be 'global' or 'local', got {self.normalization!r}")
        if not 0 <= self.threshold_pct < 100:
            raise ValueError("threshold_pct must lie in [0, 100)")
        if not self.search_radius_factor > 0:
            raise ValueError("search_radius_factor must be positive")
        if int(self.subdivisions) != self.subdivisions or self.subdivisions < 1:
            raise ValueError("subdivisions must be an integer >= 1")
        object.__setattr__(self, "subdivisions", int(self.subdivisions))

    @property
    def search_radius_mm(self):
        return self.search_radius_factor * self.dta_mm

    def as_dict(self):
        d = asdict(self)
        d["search_radius_mm"] = self.search_radius_mm
        return d


@dataclass
class GammaResult:
    gamma_map: Grid3
    evaluated: np.ndarray = field(repr=False)
    evaluated_voxel_count: int
    passed_voxel_count: int
    mean_gamma: float
    max_gamma: float
    params: GammaParams

    @property
    def pass_rate_pct(self):
        return pass_rate(self)

    def summary(self):
        return {
            "pass_rate_pct": self.pass_rate_pct,
            "evaluated_voxel_count": self.evaluated_voxel_count,
            "passed_voxel_count": self.passed_voxel_count,
            "mean_gamma": self.mean_gamma,
            "max_gamma": self.max_gamma,
            "params": self.params.as_dict(),
        }


def pass_rate(result):
    """Percentage of evaluated voxels with gamma <= 1."""
    if result.evaluated_voxel_count <= 0:
        raise EmptyEvaluation("no evaluated voxels")
    return 100.0 * result.passed_voxel_count / result.evaluated_voxel_count


def lattice_offsets(spacing, subdivisions, radius_mm, dta_mm):
    """Sample offsets inside the search sphere, sorted by distance.

    Returns ``(q, d2n)``: integer offsets in units of ``1/subdivisions`` voxel,
    shape (M, 3) in (x, y, z) order, and the squared distance divided by
    ``dta_mm**2``.  The zero offset comes first.
    """
    k = int(subdivisions)
    steps = np.asarray(spacing, dtype=np.float64) / k
    reach = np.floor(radius_mm / steps).astype(int)
    axes = [np.arange(-r, r + 1) for r in reach]
    qx, qy, qz = np.meshgrid(*axes, indexing="ij")
    q = np.stack([qx.ravel(), qy.ravel(), qz.ravel()], axis=1)
    dist2 = (q[:, 0] * steps[0]) ** 2 + (q[:, 1] * steps[1]) ** 2 + (q[:, 2] * steps[2]) ** 2
    keep = dist2 <= radius_mm * radius_mm * (1 + 1e-12)
    q, dist2 = q[keep], dist2[keep]
    order = np.lexsort((q[:, 0], q[:, 1], q[:, 2], dist2))
    return q[order].astype(np.int64), dist2[order] / (dta_mm * dta_mm)


def _setup(ref, ev, p):
    if not isinstance(ref, Grid3) or not isinstance(ev, Grid3):
        raise TypeError("gamma analysis needs two Grid3 inputs")
    require_same_geometry(ref, ev, "reference and evaluated dose grids")
    dmax = float(ref.values.max())
    if not dmax > 0:
        raise EmptyEvaluation("reference maximum dose must be positive")
    cut = p.threshold_pct / 100.0 * dmax
    included = ref.values >= cut
    if p.normalization == "local":
        included &= ref.values > 0
        crit = p.dose_criterion_pct / 100.0 * ref.values
    else:
        crit = np.full(ref.values.shape, p.dose_criterion_pct / 100.0 * dmax)
    if not included.any():
        raise EmptyEvaluation("every reference voxel lies below the dose threshold")
    vox = np.argwhere(included)  # (z, y, x) rows in C order
    return vox, crit[included]


def _finish(ref, vox, gammas, p):
    gmap = np.zeros(ref.values.shape)
    gmap[vox[:, 0], vox[:, 1], vox[:, 2]] = gammas
    evaluated = np.zeros(ref.values.shape, dtype=bool)
    evaluated[vox[:, 0], vox[:, 1], vox[:, 2]] = True
    n = len(gammas)
    passed = int(np.count_nonzero(gammas <= 1.0 + PASS_TOLERANCE))
    evaluated.setflags(write=False)
    return GammaResult(
        gamma_map=ref.with_values(gmap, unit="gamma"),
        evaluated=evaluated,
        evaluated_voxel_count=n,
        passed_voxel_count=passed,
        mean_gamma=math.fsum(gammas.tolist()) / n,
        max_gamma=float(gammas.max()),
        params=p,
    )


def _refined_samples(ev, k):
    """Evaluated dose at every lattice node, or None when that would be too large."""
    nz, ny, nx = ev.shape
    shape = ((nz - 1) * k + 1, (ny - 1) * k + 1, (nx - 1) * k + 1)
    if np.prod(shape, dtype=np.int64) > BRUTE_TABLE_LIMIT:
        return None
    iz, iy, ix = (np.arange(n) / k for n in shape)
    return trilinear_index(ev, ix[None, None, :], iy[None, :, None], iz[:, None, None])


def _brute_tabulated(ref, table, vox, crit, q, d2n, k):
    # one strided view of the padded lattice table per offset, over the whole grid
    nz, ny, nx = ref.values.shape
    reach = np.abs(q).max(axis=0)  # (x, y, z)
    rx, ry, rz = (int(r) for r in reach)
    padded = np.full((table.shape[0] + 2 * rz, table.shape[1] + 2 * ry, table.shape[2] + 2 * rx), np.nan)
    padded[rz:rz + table.shape[0], ry:ry + table.shape[1], rx:rx + table.shape[2]] = table
    dd = np.full(ref.values.shape, np.nan)
    dd[vox[:, 0], vox[:, 1], vox[:, 2]] = crit
    best = np.full(ref.values.shape, np.inf)
    work = np.empty(ref.values.shape)
    for (qx, qy, qz), dn in zip(q.tolist(), d2n.tolist()):
        view = padded[rz + qz:rz + qz + (nz - 1) * k + 1:k,
                      ry + qy:ry + qy + (ny - 1) * k + 1:k,
                      rx + qx:rx + qx + (nx - 1) * k + 1:k]
        np.subtract(view, ref.values, out=work)
        np.divide(work, dd, out=work)
        np.multiply(work, work, out=work)
        work += dn
        np.fmin(best, work, out=best)  # NaN (outside the grid) never wins
    return best[vox[:, 0], vox[:, 1], vox[:, 2]]


def gamma_index_brute(ref, ev, p=None, chunk=256):
    """Exhaustive gamma: every lattice point in the search sphere is tested."""
    p = p or GammaParams()
    vox, crit = _setup(ref, ev, p)
    q, d2n = lattice_offsets(ref.spacing, p.subdivisions, p.search_radius_mm, p.dta_mm)
    k = p.subdivisions
    table = _refined_samples(ev.values, k)
    if table is not None:
        return _finish(ref, vox, np.sqrt(_brute_tabulated(ref, table, vox, crit, q, d2n, k)), p)
    nz, ny, nx = ev.values.shape
    upper = np.array([nx - 1, ny - 1, nz - 1]) * k
    base = vox[:, ::-1] * k  # (x, y, z) in lattice units
    dref = ref.values[vox[:, 0], vox[:, 1], vox[:, 2]]
    best = np.full(len(vox), np.inf)
    for start in range(0, len(q), chunk):
        qs, ds = q[start:start + chunk], d2n[start:start + chunk]
        pos = base[None, :, :] + qs[:, None, :]
        inside = np.all((pos >= 0) & (pos <= upper), axis=2)
        pos = np.where(inside[..., None], pos, 0)
        de = trilinear_index(ev.values, pos[..., 0] / k, pos[..., 1] / k, pos[..., 2] / k)
        g2 = ds[:, None] + ((de - dref[None, :]) / crit[None, :]) ** 2
        g2 = np.where(inside, g2, np.inf)
        best = np.minimum(best, g2.min(axis=0))
    return _finish(ref, vox, np.sqrt(best), p)


@numba.njit(parallel=True, cache=True, fastmath=False)
def _gamma_kernel(dref, ev, vox, crit, q, d2n, dist, k, out):
    nz, ny, nx = ev.shape
    ux, uy, uz = (nx - 1) * k, (ny - 1) * k, (nz - 1) * k
    m = vox.shape[0]
    for t in numba.prange(m):
        z = vox[t, 0]
        y = vox[t, 1]
        x = vox[t, 2]
        dr = dref[t]
        dd = crit[t]
        best = np.inf
        for j in range(q.shape[0]):
            if dist[j] >= best:
                break
            px = x * k + q[j, 0]
            py = y * k + q[j, 1]
            pz = z * k + q[j, 2]
            if px < 0 or px > ux or py < 0 or py > uy or pz < 0 or pz > uz:
                continue
            x0 = min(px // k, max(nx - 2, 0))
            fx = px / k - x0
            y0 = min(py // k, max(ny - 2, 0))
            fy = py / k - y0
            z0 = min(pz // k, max(nz - 2, 0))
            fz = pz / k - z0
            x1 = min(x0 + 1, nx - 1)
            y1 = min(y0 + 1, ny - 1)
            z1 = min(z0 + 1, nz - 1)
            c00 = ev[z0, y0, x0] * (1 - fx) + ev[z0, y0, x1] * fx
            c10 = ev[z0, y1, x0] * (1 - fx) + ev[z0, y1, x1] * fx
            c01 = ev[z1, y0, x0] * (1 - fx) + ev[z1, y0, x1] * fx
            c11 = ev[z1, y1, x0] * (1 - fx) + ev[z1, y1, x1] * fx
            c0 = c00 * (1 - fy) + c10 * fy
            c1 = c01 * (1 - fy) + c11 * fy
            de = c0 * (1 - fz) + c1 * fz
            r = (de - dr) / dd
            g = math.sqrt(d2n[j] + r * r)
            if g < best:
                best = g
        out[t] = best


def default_threads():
    env = os.environ.get("FLXQA_THREADS")
    if env:
        return int(env)
    return numba.config.NUMBA_NUM_THREADS


@contextmanager
def thread_count(n):
    """Temporarily run numba parallel regions with ``n`` threads (clamped to the pool size)."""
    old = numba.get_num_threads()
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    try:
        yield n
    finally:
        numba.set_num_threads(old)


def gamma_index_fast(ref, ev, p=None, threads=None):
    """Distance-ordered, pruned, voxel-parallel gamma; same result as the brute scan."""
    p = p or GammaParams()
    vox, crit = _setup(ref, ev, p)
    q, d2n = lattice_offsets(ref.spacing, p.subdivisions, p.search_radius_mm, p.dta_mm)
    dref = np.ascontiguousarray(ref.values[vox[:, 0], vox[:, 1], vox[:, 2]])
    out = np.empty(len(vox))
    with thread_count(threads or default_threads()):
        _gamma_kernel(dref, np.ascontiguousarray(ev.values), vox.astype(np.int64),
                      np.ascontiguousarray(crit), q, d2n, np.sqrt(d2n), p.subdivisions, out)
    return _finish(ref, vox, out, p)


def gamma_index(ref, ev, p=None, method="fast", threads=None):
    if method == "fast":
        return gamma_index_fast(ref, ev, p, threads)
    if method == "brute":
        return gamma_index_brute(ref, ev, p)
    raise ValueError(f"unknown gamma method {method!r}")

