import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from flxqa.errors import OutOfBounds, ShapeError
from flxqa.volgrid import (
    FluenceMap,
    FluenceSet,
    Grid3,
    Mask3,
    PatientTensorSpec,
    merged_labels,
    minmax_normalize,
    patient_input_tensor,
    resample_plane,
    trilinear_sample,
    trilinear_sample_many,
)


def test_grid_rejects_non_finite_and_bad_spacing():
    with pytest.raises(ValueError):
        Grid3(np.array([[[np.nan]]]))
    with pytest.raises(ValueError):
        Grid3(np.ones((1, 1, 1)), spacing=(1, 0, 1))
    with pytest.raises(ShapeError):
        Grid3(np.ones((2, 2)))


def test_grid_dims_are_xyz():
    g = Grid3(np.zeros((4, 3, 2)))
    assert g.dims == (2, 3, 4)


def test_resample_identity_is_bit_identical():
    rng = np.random.default_rng(1)
    g = Grid3(rng.random((3, 128, 128)), (1.28, 1.28, 3.0), (-80.0, -80.0, 0.0))
    out = resample_plane(g, (128, 128))
    assert out == g


@pytest.mark.parametrize("target", [(1, 1), (7, 3), (128, 128), (200, 64)])
def test_resample_constant(target):
    g = Grid3(np.full((2, 10, 13), 4.25), (1.5, 2.0, 3.0))
    out = resample_plane(g, target)
    assert out.values.shape == (2,) + target
    assert np.all(out.values == 4.25)


def test_resample_ramp_4x4_to_2x2():
    # Oracle: old voxel centers at 0..3, old edges at -0.5 and 3.5.  New 2x2
    # centers sit at 0.5 and 2.5 in old index units; the ramp x + 10 y is linear
    # so bilinear interpolation returns the field value there.
    y, x = np.mgrid[0:4, 0:4]
    g = Grid3((x + 10.0 * y)[None], (1.0, 1.0, 1.0))
    out = resample_plane(g, (2, 2))
    expected = np.array([[5.5, 7.5], [25.5, 27.5]])
    np.testing.assert_allclose(out.values[0], expected, rtol=0, atol=1e-12)
    assert out.spacing[:2] == (2.0, 2.0)
    # extent preserved: outer edges stay at -0.5 and 3.5
    assert out.origin[0] - out.spacing[0] / 2 == pytest.approx(-0.5)
    assert out.origin[0] + (2 - 0.5) * out.spacing[0] == pytest.approx(3.5)


def test_resample_matches_map_coordinates_oracle():
    rng = np.random.default_rng(5)
    vals = rng.random((2, 17, 23))
    g = Grid3(vals, (1.1, 0.9, 2.0))
    out = resample_plane(g, (11, 40))
    # independent route: scipy linear interpolation at the same source coordinates
    ys = np.clip((np.arange(11) + 0.5) * 17 / 11 - 0.5, 0, 16)
    xs = np.clip((np.arange(40) + 0.5) * 23 / 40 - 0.5, 0, 22)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    for k in range(2):
        ref = ndimage.map_coordinates(vals[k], [yy, xx], order=1, mode="nearest")
        np.testing.assert_allclose(out.values[k], ref, rtol=1e-12, atol=1e-12)


def test_resample_idempotent():
    rng = np.random.default_rng(2)
    g = Grid3(rng.random((1, 30, 20)))
    once = resample_plane(g, (16, 16))
    assert resample_plane(once, (16, 16)) == once


def test_minmax_endpoints_and_clamp():
    g = Grid3(np.array([[[0.0, 4.0]]]))
    assert np.array_equal(minmax_normalize(g, 0, 4).values, [[[0.0, 1.0]]])
    g = Grid3(np.array([[[-2.0, 0.0, 5.0]]]))
    out = minmax_normalize(g, 0, 4)
    assert np.array_equal(out.values, [[[0.0, 0.0, 1.0]]])
    assert out.unit == "unitless"


def test_minmax_midpoint():
    c = 12.0
    g = Grid3(np.full((2, 2, 2), c))
    assert np.all(minmax_normalize(g, c - 0.5, c + 0.5).values == 0.5)


def test_minmax_degenerate_range():
    with pytest.raises(ValueError):
        minmax_normalize(Grid3(np.ones((1, 1, 1))), 1.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40),
    st.floats(-100, 100),
    st.floats(0.01, 500),
)
def test_minmax_range_and_monotone(vals, lo, width):
    v = np.sort(np.array(vals))
    out = minmax_normalize(Grid3(v[None, None, :]), lo, lo + width).values.ravel()
    assert np.all((out >= 0) & (out <= 1))
    assert np.all(np.diff(out) >= 0)


def test_trilinear_voxel_center_and_midpoint():
    vals = np.zeros((2, 2, 2))
    vals[:, :, 0] = 10.0
    vals[:, :, 1] = 20.0
    g = Grid3(vals, (2.0, 2.0, 2.0), (1.0, 1.0, 1.0))
    assert trilinear_sample(g, (1.0, 1.0, 1.0)) == 10.0
    assert trilinear_sample(g, (3.0, 3.0, 3.0)) == 20.0
    assert trilinear_sample(g, (2.0, 1.0, 1.0)) == 15.0


def test_trilinear_constant_and_bounds():
    g = Grid3(np.full((3, 4, 5), 7.5), (1.0, 2.0, 3.0), (-1.0, 0.0, 5.0))
    assert trilinear_sample(g, (0.3, 3.1, 9.7)) == pytest.approx(7.5, abs=1e-12)
    with pytest.raises(OutOfBounds):
        trilinear_sample(g, (-1.5, 0.0, 5.0))
    with pytest.raises(OutOfBounds):
        trilinear_sample(g, (0.0, 0.0, 5.0 + 3.0 * 2 + 0.01))


@settings(max_examples=40, deadline=None)
@given(
    st.tuples(*[st.floats(-5, 5)] * 4),
    st.tuples(*[st.floats(0.0, 1.0)] * 3),
)
def test_trilinear_exact_on_affine_fields(coef, frac):
    a, b, c, d = coef
    spacing = (1.5, 0.7, 2.5)
    origin = (-3.0, 4.0, 1.0)
    g = Grid3(np.zeros((4, 5, 6)), spacing, origin)
    x, y, z = (g.axis_coords(i) for i in range(3))
    field = a * x[None, None, :] + b * y[None, :, None] + c * z[:, None, None] + d
    g = g.with_values(field)
    pt = [o + f * (n - 1) * s for o, f, n, s in zip(origin, frac, g.dims, spacing)]
    expected = a * pt[0] + b * pt[1] + c * pt[2] + d
    got = trilinear_sample(g, pt)
    assert got == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_trilinear_many_fills_outside():
    g = Grid3(np.ones((2, 2, 2)))
    out = trilinear_sample_many(g, [[0.5, 0.5, 0.5], [5, 0, 0]])
    assert out[0] == 1.0 and np.isnan(out[1])


def test_fluence_set_requires_nine_beams():
    maps = [FluenceMap(np.zeros((2, 2)), i) for i in range(1, 10)]
    fs = FluenceSet(tuple(reversed(maps)))
    assert [m.beam_index for m in fs] == list(range(1, 10))
    assert fs.as_tensor().shape == (9, 2, 2)
    with pytest.raises(ValueError):
        FluenceSet(tuple(maps[:8]))
    with pytest.raises(ValueError):
        FluenceSet(tuple(maps[:8] + [maps[0]]))


def test_fluence_rejects_negative():
    with pytest.raises(ValueError):
        FluenceMap(np.array([[-1.0]]))
    with pytest.raises(ValueError):
        FluenceMap(np.zeros((1, 1)), beam_index=10)


def test_patient_tensor_contract():
    spec = PatientTensorSpec(n_slices=5)
    ct = Grid3(np.random.default_rng(0).random((5, 128, 128)), unit="unitless")
    contour = Mask3.like(ct, ct.values > 0.5, "PTV")
    x = patient_input_tensor(ct, contour)
    spec.check_input(x)
    assert spec.output_shape == (9, 5, 128, 128)
    with pytest.raises(ShapeError):
        spec.check_output(np.zeros((9, 5, 64, 64)))


def test_merged_labels():
    g = Grid3(np.zeros((1, 2, 2)))
    a = Mask3.like(g, np.array([[[1, 0], [0, 0]]]), "A")
    b = Mask3.like(g, np.array([[[1, 1], [0, 0]]]), "B")
    labels, names = merged_labels([a, b])
    assert names == ["A", "B"]
    assert labels.tolist() == [[[2, 2], [0, 0]]]
