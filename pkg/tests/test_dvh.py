import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flxqa.dvh import (
    compute_dvh,
    dose_at_volume,
    dvh_indices,
    exact_dose_at_volume,
    exact_volume_at_dose,
    structure_minmaxmean,
    volume_at_dose,
)
from flxqa.errors import EmptyStructure, GeometryError
from flxqa.phantom import PhantomSpec, expected_outcomes, make_phantom
from flxqa.volgrid import Grid3, Mask3


def sort_percentile(doses, volume_pct):
    """Dose of the voxel at which the hottest volume_pct percent is first covered."""
    d = sorted(doses, reverse=True)
    need = volume_pct / 100 * len(d)
    for i, v in enumerate(d, start=1):
        if i >= need - 1e-9:
            return v
    return d[-1]


def _grid_and_mask(values, mask=None):
    g = Grid3(np.asarray(values, dtype=float), unit="Gy")
    m = Mask3.like(g, np.ones(g.values.shape, bool) if mask is None else mask, "S")
    return g, m


def test_uniform_step():
    g, m = _grid_and_mask(np.full((3, 4, 5), 70.0))
    c = compute_dvh(g, m)
    assert np.all(c.cum_volume_pct[c.bin_edges <= 70] == 100)
    assert np.all(c.cum_volume_pct[c.bin_edges > 70] == 0)
    assert dose_at_volume(c, 95) == 70.0
    assert volume_at_dose(c, 65) == 100.0
    assert volume_at_dose(c, 75) == 0.0


def test_two_voxel_enumeration():
    g, m = _grid_and_mask([[[10.0, 30.0]]])
    c = compute_dvh(g, m)
    e, v = c.bin_edges, c.cum_volume_pct
    assert np.all(v[e <= 10 + 1e-9] == 100)
    assert np.all(v[(e > 10 + 1e-9) & (e <= 30 + 1e-9)] == 50)
    assert np.all(v[e > 30 + 1e-9] == 0)
    assert structure_minmaxmean(g, m) == (10.0, 30.0, 20.0)


def test_curve_invariants():
    rng = np.random.default_rng(0)
    g, m = _grid_and_mask(rng.uniform(0, 50, (4, 5, 6)))
    c = compute_dvh(g, m)
    assert c.cum_volume_pct[0] == 100.0 and c.cum_volume_pct[-1] == 0.0
    assert np.all(np.diff(c.cum_volume_pct) <= 0)
    assert np.allclose(np.diff(c.bin_edges), c.bin_width)


def test_ramp_phantom_indices():
    # 1400 voxels across x make the ramp step equal to one 0.05 Gy bin
    spec = PhantomSpec("ramp-x", dims=(1400, 2, 2), spacing=(0.5, 2, 2), amplitude=70.0)
    ph = make_phantom(spec)
    body = ph.masks[0]
    exp = expected_outcomes(spec)["dvh"]
    _, idx = dvh_indices(ph.ref, body, levels=[35.0])
    assert exp["D95"] == pytest.approx(3.5)
    assert abs(idx.d95 - exp["D95"]) <= 0.05
    assert abs(idx.d98 - exp["D98"]) <= 0.05
    assert abs(idx.v_levels[35.0] - exp["V_half_amplitude"]) <= 100 / 1400


def test_d100_is_min_and_v0_is_full():
    rng = np.random.default_rng(1)
    g, m = _grid_and_mask(rng.uniform(3, 40, (5, 5, 5)))
    c = compute_dvh(g, m)
    assert dose_at_volume(c, 100) == c.min_dose
    assert volume_at_dose(c, 0) == 100.0


def test_masked_max_ignores_outside_hotspot():
    vals = np.full((2, 2, 2), 10.0)
    vals[0, 0, 0] = 99.0
    mask = np.ones((2, 2, 2), bool)
    mask[0, 0, 0] = False
    g, m = _grid_and_mask(vals, mask)
    assert structure_minmaxmean(g, m)[1] == 10.0
    assert g.values.max() == 99.0


def test_matches_sort_oracle_on_random_masked_grids():
    rng = np.random.default_rng(2)
    for _ in range(10):
        vals = rng.gamma(3.0, 10.0, (6, 7, 8))
        mask = rng.random(vals.shape) < 0.4
        g, m = _grid_and_mask(vals, mask)
        doses = vals[mask]
        c = compute_dvh(g, m)
        for v in (2, 50, 95, 98, 100):
            assert abs(dose_at_volume(c, v) - sort_percentile(doses, v)) <= c.bin_width
            assert dose_at_volume(c, v) == pytest.approx(exact_dose_at_volume(doses, v), abs=c.bin_width)
        for lv in (5.0, 20.0, 40.0):
            ref = 100 * np.count_nonzero(doses >= lv) / doses.size
            assert abs(volume_at_dose(c, lv) - ref) <= 100 / doses.size * (1 + 1e-9) + 1e-9
            assert exact_volume_at_dose(doses, lv) == ref


def test_bin_refinement_moves_indices_by_at_most_one_bin():
    rng = np.random.default_rng(3)
    g, m = _grid_and_mask(rng.uniform(0, 70, (6, 6, 6)))
    coarse = compute_dvh(g, m, 0.1)
    fine = compute_dvh(g, m, 0.05)
    for v in (50, 95, 98):
        assert abs(dose_at_volume(coarse, v) - dose_at_volume(fine, v)) <= 0.1


def test_scaling_dose_scales_indices():
    rng = np.random.default_rng(4)
    vals = rng.uniform(0, 30, (5, 6, 7))
    g, m = _grid_and_mask(vals)
    g2, _ = _grid_and_mask(vals * 2)
    c1, c2 = compute_dvh(g, m), compute_dvh(g2, m)
    for v in (50, 95):
        assert abs(dose_at_volume(c2, v) - 2 * dose_at_volume(c1, v)) <= 2 * 0.05 + 0.05


def test_quasi_inverse():
    rng = np.random.default_rng(5)
    g, m = _grid_and_mask(rng.uniform(0, 60, (6, 6, 6)))
    c = compute_dvh(g, m)
    for v in (10, 50, 95, 98):
        assert volume_at_dose(c, dose_at_volume(c, v)) >= v - 100 / c.voxel_count - 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=60), st.floats(1, 100))
def test_index_invariants(doses, v):
    g, m = _grid_and_mask(np.array(doses)[None, None, :])
    _, idx = dvh_indices(g, m, levels=[10.0])
    assert idx.d98 <= idx.d95 <= idx.max_dose
    assert 0 <= idx.v_levels[10.0] <= 100
    c = compute_dvh(g, m)
    assert abs(dose_at_volume(c, v) - sort_percentile(doses, v)) <= c.bin_width + 1e-9


def test_errors():
    g, _ = _grid_and_mask(np.ones((2, 2, 2)))
    with pytest.raises(EmptyStructure):
        compute_dvh(g, Mask3.like(g, np.zeros((2, 2, 2)), "E"))
    other = Mask3(np.ones((2, 2, 2), bool), "X", spacing=(2, 1, 1))
    with pytest.raises(GeometryError):
        compute_dvh(g, other)


def test_csv_export():
    g, m = _grid_and_mask([[[0.0, 0.1]]])
    text = compute_dvh(g, m).to_csv()
    lines = text.splitlines()
    assert lines[0] == "dose_gy,cum_volume_pct"
    assert lines[1] == "0.000000,100.000000"
