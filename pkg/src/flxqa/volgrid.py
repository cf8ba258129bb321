"""Volumetric and planar data types plus resampling and normalization.

Arrays are stored z-major so that ``values.ravel()`` is x-fastest, which is
the byte order every file format in :mod:`flxqa.ingest` uses.  The origin is
the physical position (mm) of the *center* of voxel (0, 0, 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .errors import GeometryError, OutOfBounds, ShapeError

UNITS = ("Gy", "HU", "unitless", "gamma")

N_BEAMS = 9
PLANE = (128, 128)


def _frozen(arr, dtype=np.float64):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _triple(seq, name):
    t = tuple(float(v) for v in seq)
    if len(t) != 3:
        raise ShapeError(f"{name} must have three components, got {len(t)}")
    return t


@dataclass(frozen=True, eq=False)
class Grid3:
    """Scalar field on a regular 3D lattice.

    ``values`` has shape ``(nz, ny, nx)``; ``spacing`` and ``origin`` are
    given in (x, y, z) order, in mm.
    """

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    unit: str = "Gy"

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 3:
            raise ShapeError(f"Grid3 values must be 3D (nz, ny, nx), got ndim={vals.ndim}")
        if min(vals.shape) < 1:
            raise ShapeError(f"Grid3 dims must all be >= 1, got {vals.shape[::-1]}")
        vals = _frozen(vals)
        if not np.all(np.isfinite(vals)):
            raise ValueError("Grid3 values must be finite")
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise GeometryError(f"spacing must be positive, got {spacing}")
        origin = _triple(self.origin, "origin")
        if self.unit not in UNITS:
            raise ValueError(f"unknown unit tag {self.unit!r}; expected one of {UNITS}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self):
        """Voxel counts as (nx, ny, nz)."""
        nz, ny, nx = self.values.shape
        return (nx, ny, nz)

    @property
    def size(self):
        return self.values.size

    def axis_coords(self, axis):
        """Voxel-center coordinates (mm) along axis 0=x, 1=y, 2=z."""
        n = self.dims[axis]
        return self.origin[axis] + self.spacing[axis] * np.arange(n)

    def with_values(self, values, unit=None):
        return Grid3(values, self.spacing, self.origin, unit or self.unit)

    def same_geometry(self, other, rtol=1e-9):
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=rtol, atol=0)
            and np.allclose(self.origin, other.origin, rtol=0, atol=rtol * max(self.spacing))
        )

    def __eq__(self, other):
        if not isinstance(other, Grid3):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.origin == other.origin
            and self.unit == other.unit
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def require_same_geometry(a, b, what="grids"):
    if not a.same_geometry(b):
        raise GeometryError(
            f"{what} differ in geometry: dims {a.dims} vs {b.dims}, "
            f"spacing {a.spacing} vs {b.spacing}, origin {a.origin} vs {b.origin}"
        )


@dataclass(frozen=True, eq=False)
class Mask3:
    """Binary structure occupancy sharing the geometry of a dose grid."""

    values: np.ndarray
    name: str
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 3:
            raise ShapeError("Mask3 values must be 3D (nz, ny, nx)")
        if vals.dtype != bool:
            if not np.all((vals == 0) | (vals == 1)):
                raise ValueError("Mask3 values must be 0 or 1")
        if not self.name:
            raise ValueError("Mask3 needs a nonempty structure name")
        object.__setattr__(self, "values", _frozen(vals, bool))
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @classmethod
    def like(cls, grid, values, name):
        return cls(values, name, grid.spacing, grid.origin)

    @property
    def dims(self):
        nz, ny, nx = self.values.shape
        return (nx, ny, nz)

    @property
    def count(self):
        return int(np.count_nonzero(self.values))

    def same_geometry(self, other, rtol=1e-9):
        return Grid3.same_geometry(self, other, rtol)  # duck-typed on dims/spacing/origin


def merged_labels(masks):
    """Collapse per-structure masks into one integer label volume.

    Label ``i + 1`` marks ``masks[i]``; later masks overwrite earlier ones
    where they overlap.  Returns ``(labels, names)``.
    """
    if not masks:
        raise ValueError("need at least one mask")
    ref = masks[0]
    labels = np.zeros(ref.values.shape, dtype=np.uint8)
    for i, m in enumerate(masks):
        if not m.same_geometry(ref):
            raise GeometryError(f"mask {m.name!r} does not share geometry with {ref.name!r}")
        labels[m.values] = i + 1
    return labels, [m.name for m in masks]


@dataclass(frozen=True, eq=False)
class FluenceMap:
    """Per-beam 2D fluence; ``values`` has shape (rows, cols)."""

    values: np.ndarray
    beam_index: int = 1
    gantry_angle: float = 0.0
    spacing: tuple = (1.0, 1.0)
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2 or min(vals.shape) < 1:
            raise ShapeError(f"FluenceMap values must be a nonempty 2D array, got shape {vals.shape}")
        vals = _frozen(vals)
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("fluence values must be finite and nonnegative")
        if not 1 <= int(self.beam_index) <= N_BEAMS:
            raise ValueError(f"beam_index must lie in 1..{N_BEAMS}, got {self.beam_index}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 2 or min(spacing) <= 0:
            raise GeometryError(f"fluence spacing must be two positive values, got {spacing}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "beam_index", int(self.beam_index))
        object.__setattr__(self, "gantry_angle", float(self.gantry_angle))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FluenceMap):
            return NotImplemented
        return (
            self.beam_index == other.beam_index
            and self.gantry_angle == other.gantry_angle
            and self.spacing == other.spacing
            and self.origin == other.origin
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class FluenceSet:
    """Exactly nine fluence maps, one per beam, sorted by beam index."""

    maps: tuple

    def __post_init__(self):
        maps = tuple(sorted(self.maps, key=lambda m: m.beam_index))
        indices = [m.beam_index for m in maps]
        if indices != list(range(1, N_BEAMS + 1)):
            raise ValueError(f"a FluenceSet needs beams 1..{N_BEAMS} exactly once, got {indices}")
        object.__setattr__(self, "maps", maps)

    def __iter__(self):
        return iter(self.maps)

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, beam_index):
        return self.maps[beam_index - 1]

    def as_tensor(self):
        """Stack into a ``(9, rows, cols)`` array; all maps must match in shape."""
        shapes = {m.values.shape for m in self.maps}
        if len(shapes) != 1:
            raise ShapeError(f"fluence maps differ in shape: {sorted(shapes)}")
        return np.stack([m.values for m in self.maps])


def equally_spaced_angles(n=N_BEAMS):
    return [360.0 * i / n for i in range(n)]


@dataclass(frozen=True)
class PatientTensorSpec:
    """Channel/plane contract of the network: 2 x N x 128 x 128 in, 9 x N x 128 x 128 out."""

    n_slices: int
    channels_in: int = 2
    channels_out: int = N_BEAMS
    plane: tuple = field(default=PLANE)

    def __post_init__(self):
        if self.channels_in != 2 or self.channels_out != N_BEAMS or tuple(self.plane) != PLANE:
            raise ShapeError("channel and plane counts are fixed at 2 in, 9 out, 128x128")
        if self.n_slices < 1:
            raise ShapeError("n_slices must be >= 1")

    @property
    def input_shape(self):
        return (self.channels_in, self.n_slices) + tuple(self.plane)

    @property
    def output_shape(self):
        return (self.channels_out, self.n_slices) + tuple(self.plane)

    def check_input(self, arr):
        if tuple(np.shape(arr)) != self.input_shape:
            raise ShapeError(f"expected input shape {self.input_shape}, got {np.shape(arr)}")

    def check_output(self, arr):
        if tuple(np.shape(arr)) != self.output_shape:
            raise ShapeError(f"expected output shape {self.output_shape}, got {np.shape(arr)}")


def patient_input_tensor(ct, contour):
    """Concatenate a normalized CT and a contour volume into a (2, N, rows, cols) tensor."""
    if ct.values.shape != contour.values.shape:
        raise GeometryError(f"CT shape {ct.values.shape} != contour shape {contour.values.shape}")
    return np.stack([ct.values, np.asarray(contour.values, dtype=np.float64)])


# -- resampling ---------------------------------------------------------------


def _linear_weights(n_in, n_out):
    """Source positions for an extent-preserving resize, as (i0, i1, frac)."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.intp)
    i0 = np.minimum(i0, max(n_in - 2, 0))
    frac = pos - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, frac


def resample_plane(grid, target):
    """Bilinear in-plane resize of every slice to ``target = (rows, cols)``.

    The field of view (``n * spacing`` per axis) is preserved; the origin moves
    so that the outer voxel edges stay put.  Slices are untouched.
    """
    rows, cols = (int(t) for t in target)
    if rows < 1 or cols < 1:
        raise ShapeError(f"target dims must be >= 1, got {target}")
    if not np.all(np.isfinite(grid.values)):
        raise ValueError("cannot resample a grid with non-finite values")
    nx, ny, nz = grid.dims
    if (rows, cols) == (ny, nx):
        return Grid3(grid.values, grid.spacing, grid.origin, grid.unit)

    v = grid.values
    y0, y1, fy = _linear_weights(ny, rows)
    x0, x1, fx = _linear_weights(nx, cols)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    top = v[:, y0][:, :, x0] * (1 - fx) + v[:, y0][:, :, x1] * fx
    bot = v[:, y1][:, :, x0] * (1 - fx) + v[:, y1][:, :, x1] * fx
    out = top * (1 - fy) + bot * fy

    sx, sy, sz = grid.spacing
    new_sx, new_sy = sx * nx / cols, sy * ny / rows
    ox = grid.origin[0] - sx / 2 + new_sx / 2
    oy = grid.origin[1] - sy / 2 + new_sy / 2
    return Grid3(out, (new_sx, new_sy, sz), (ox, oy, grid.origin[2]), grid.unit)


def minmax_normalize(grid, lo, hi):
    """Map ``[lo, hi]`` onto ``[0, 1]``, clamping values outside the range."""
    lo, hi = float(lo), float(hi)
    if not hi > lo:
        raise ValueError(f"degenerate normalization range: lo={lo}, hi={hi}")
    out = np.clip((grid.values - lo) / (hi - lo), 0.0, 1.0)
    return grid.with_values(out, unit="unitless")


def cohort_range(grids):
    """Global (min, max) across a set of grids, for use as normalization bounds."""
    lo = min(float(g.values.min()) for g in grids)
    hi = max(float(g.values.max()) for g in grids)
    return lo, hi


# -- interpolation ------------------------------------------------------------


def trilinear_index(values, ix, iy, iz):
    """Trilinear interpolation at fractional *index* coordinates.

    ``values`` is (nz, ny, nx); coordinates must already lie inside
    ``[0, n - 1]`` on each axis.  Broadcasts over array coordinates.
    """
    nz, ny, nx = values.shape
    corners = []
    for c, n in ((ix, nx), (iy, ny), (iz, nz)):
        c = np.asarray(c, dtype=np.float64)
        i0 = np.floor(c).astype(np.intp)
        i0 = np.minimum(i0, max(n - 2, 0))
        f = c - i0
        i1 = np.minimum(i0 + 1, n - 1)
        corners.append((i0, i1, f))
    (x0, x1, fx), (y0, y1, fy), (z0, z1, fz) = corners
    c00 = values[z0, y0, x0] * (1 - fx) + values[z0, y0, x1] * fx
    c10 = values[z0, y1, x0] * (1 - fx) + values[z0, y1, x1] * fx
    c01 = values[z1, y0, x0] * (1 - fx) + values[z1, y0, x1] * fx
    c11 = values[z1, y1, x0] * (1 - fx) + values[z1, y1, x1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def mm_to_index(grid, points):
    pts = np.asarray(points, dtype=np.float64)
    return (pts - np.asarray(grid.origin)) / np.asarray(grid.spacing)


def trilinear_sample(grid, point_mm, tol=1e-9):
    """Interpolated value at a physical point (mm).

    Raises :class:`OutOfBounds` if the point lies outside the hull of voxel
    centers (a relative slack of ``tol`` voxels is allowed for round-off).
    """
    idx = mm_to_index(grid, point_mm)
    if idx.shape != (3,):
        raise ShapeError("point_mm must be a single (x, y, z) triple")
    upper = np.array(grid.dims, dtype=np.float64) - 1
    if np.any(idx < -tol) or np.any(idx > upper + tol):
        raise OutOfBounds(f"point {tuple(point_mm)} mm lies outside the grid")
    idx = np.clip(idx, 0.0, upper)
    return float(trilinear_index(grid.values, idx[0], idx[1], idx[2]))


def trilinear_sample_many(grid, points_mm, fill=np.nan):
    """Vectorized :func:`trilinear_sample` over an (n, 3) array; outside points get ``fill``."""
    idx = mm_to_index(grid, points_mm).reshape(-1, 3)
    upper = np.array(grid.dims, dtype=np.float64) - 1
    inside = np.all((idx >= 0) & (idx <= upper), axis=1)
    out = np.full(len(idx), fill, dtype=np.float64)
    if inside.any():
        j = idx[inside]
        out[inside] = trilinear_index(grid.values, j[:, 0], j[:, 1], j[:, 2])
    return out
