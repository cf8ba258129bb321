"""Voxel-wise agreement metrics and paired significance testing.

The Student-t tail probabilities come from a continued-fraction evaluation
of the regularized incomplete beta function; no tables and no SciPy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateVariance, InsufficientData, PairingError
from .volgrid import require_same_geometry

ALPHA = 0.05

_EPS = 1e-15
_TINY = 1e-300
_MAX_ITER = 500


def _fsum(arr):
    return math.fsum(np.asarray(arr, dtype=np.float64).ravel().tolist())


def _betacf(a, b, x):
    """Continued fraction for I_x(a, b) (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta failed to converge (a={a}, b={b}, x={x})")


def betainc_reg(a, b, x):
    """Regularized incomplete beta function I_x(a, b) for a, b > 0, 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t, df):
    """Two-sided tail probability P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return betainc_reg(df / 2.0, 0.5, x)


def student_t_cdf(t, df):
    tail = 0.5 * student_t_sf2(t, df)
    return 1.0 - tail if t > 0 else tail


@dataclass
class PairedTTest:
    n_pairs: int
    mean_diff: float
    sd_diff: float
    t_stat: float
    df: int
    p_value: float
    significant: bool
    degenerate: bool = False

    def as_dict(self):
        return asdict(self)


def paired_t_test(a, b, alpha=ALPHA):
    """Two-sided paired t-test on ``a - b``.

    When every difference is identical (zero variance) no t statistic
    exists; the result is flagged ``degenerate`` with p = 1 for a zero mean
    difference and p = 0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise PairingError(f"paired samples differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise InsufficientData("a paired t-test needs at least two pairs")
    d = a - b
    mean = _fsum(d) / n
    sd = math.sqrt(_fsum((d - mean) ** 2) / (n - 1))
    if sd == 0.0:
        if mean == 0.0:
            return PairedTTest(n, 0.0, 0.0, 0.0, n - 1, 1.0, False, degenerate=True)
        return PairedTTest(n, mean, 0.0, math.copysign(math.inf, mean), n - 1, 0.0, True,
                           degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = student_t_sf2(t, n - 1)
    return PairedTTest(n, mean, sd, t, n - 1, p, p < alpha)


@dataclass
class MeanSd:
    mean: float
    sd: float
    n: int

    def __str__(self):
        return f"{self.mean:.4g} ± {self.sd:.4g}"

    def as_dict(self):
        return {"mean": self.mean, "sd": self.sd, "n": self.n}


def cohort_summary(values):
    """Arithmetic mean and sample standard deviation across cases."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise InsufficientData("cohort summaries need at least two cases")
    mean = _fsum(v) / v.size
    sd = math.sqrt(_fsum((v - mean) ** 2) / (v.size - 1))
    return MeanSd(mean, sd, int(v.size))


@dataclass
class VoxelMetrics:
    r2: float
    mae: float
    rmse: float
    mean_delta_dose_pct: float
    n_voxels: int

    def as_dict(self):
        return asdict(self)


def voxel_metrics(ref, ev, mask=None, threshold_pct=None):
    """R^2, MAE, RMSE and mean dose difference (% of the global reference max).

    ``mask`` (a :class:`~flxqa.volgrid.Mask3`) and ``threshold_pct`` (of the
    reference max) restrict the voxels included; by default every voxel is.
    """
    require_same_geometry(ref, ev, "reference and evaluated grids")
    include = np.ones(ref.values.shape, dtype=bool)
    if mask is not None:
        require_same_geometry(ref, mask, "dose grid and mask")
        include &= mask.values
    dmax = float(ref.values.max())
    if threshold_pct is not None:
        include &= ref.values >= threshold_pct / 100.0 * dmax
    r = ref.values[include]
    e = ev.values[include]
    n = r.size
    if n < 2:
        raise InsufficientData(f"need at least two voxels, got {n}")
    diff = e - r
    ss_res = _fsum(diff * diff)
    mean_r = _fsum(r) / n
    ss_tot = _fsum((r - mean_r) ** 2)
    if ss_tot == 0.0:
        raise DegenerateVariance("reference dose is constant over the included voxels")
    if dmax == 0.0:
        raise DegenerateVariance("reference maximum is zero")
    return VoxelMetrics(
        r2=1.0 - ss_res / ss_tot,
        mae=_fsum(np.abs(diff)) / n,
        rmse=math.sqrt(ss_res / n),
        mean_delta_dose_pct=100.0 * (_fsum(diff) / n) / dmax,
        n_voxels=int(n),
    )
