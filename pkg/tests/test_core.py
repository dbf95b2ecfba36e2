import numpy as np
import pytest
from hypothesis import given, strategies as st

from usbf3d import AcquisitionConfig, Scene, VoxelGrid, build_matrix_array, paper_probe, paper_scene_five_scatterers
from usbf3d.core import tukey_apodization


def test_single_element_at_origin():
    g = build_matrix_array(1, 1, 300e-6, 300e-6, 7.8e6)
    assert g.n_elements == 1
    np.testing.assert_array_equal(g.element_positions, [[0.0, 0.0, 0.0]])


def test_32x32_extent():
    g = build_matrix_array(32, 32, 300e-6, 300e-6, 7.8e6)
    assert g.n_elements == 1024
    assert g.aperture[0] == pytest.approx(9.6e-3)


def test_2x2_positions():
    g = build_matrix_array(2, 2, 1e-3, 1e-3, 5e6)
    expected = {(-0.5e-3, -0.5e-3), (0.5e-3, -0.5e-3), (-0.5e-3, 0.5e-3), (0.5e-3, 0.5e-3)}
    got = {tuple(np.round(p[:2], 12)) for p in g.element_positions}
    assert got == {tuple(np.round(e, 12)) for e in expected}
    assert np.all(g.element_positions[:, 2] == 0)


def test_row_major_indexing():
    g = build_matrix_array(3, 4, 1e-3, 2e-3, 5e6)
    n = g.element_index(2, 1)
    assert n == 9
    assert g.element_positions[n][0] == pytest.approx((1 - 1.5) * 1e-3)
    assert g.element_positions[n][1] == pytest.approx((2 - 1.0) * 2e-3)


@pytest.mark.parametrize("args", [(0, 4, 1e-3, 1e-3, 5e6), (4, 4, 0.0, 1e-3, 5e6), (4, 4, 1e-3, -1e-3, 5e6)])
def test_invalid_arrays(args):
    with pytest.raises(ValueError):
        build_matrix_array(*args)


def test_paper_probe_aperture():
    g = paper_probe()
    assert g.aperture == pytest.approx((9.3e-3, 10.2e-3))
    assert g.center_frequency == 7.8e6


def test_point_symmetry_of_elements():
    g = paper_probe()
    np.testing.assert_allclose(g.element_positions[::-1], -g.element_positions, atol=1e-15)


def test_five_scatterer_scene():
    s = paper_scene_five_scatterers()
    np.testing.assert_allclose(s.positions()[:, 2], [15e-3, 17.5e-3, 20e-3, 22.5e-3, 25e-3])
    np.testing.assert_allclose(s.positions()[:, :2], 0.0)
    np.testing.assert_allclose(s.coefficients(), [1.0, 0.8, 0.6, 0.4, 0.2])
    np.testing.assert_allclose(np.diff(s.positions()[:, 2]), 2.5e-3)


def test_scene_motion_model():
    s = Scene.from_arrays([[0, 0, 10e-3]], 1.0)
    moving = Scene(s.scatterers, motion_model=lambda f: np.array([[f * 1e-5, 0, 0]]))
    np.testing.assert_allclose(moving.positions(3), [[3e-5, 0, 10e-3]])


def test_scatterer_coefficient_positive():
    with pytest.raises(ValueError):
        Scene.from_arrays([[0, 0, 1e-3]], 0.0)


def test_acquisition_checks():
    g = paper_probe()
    with pytest.raises(ValueError):
        AcquisitionConfig(speed_of_sound=-1)
    with pytest.raises(ValueError):
        AcquisitionConfig(transmit_apodization=np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        AcquisitionConfig(sampling_frequency=2 * g.center_frequency).validate_for(g)
    acq = AcquisitionConfig.for_probe(g)
    assert acq.sampling_frequency == 4 * g.center_frequency
    acq.validate_for(g)


def test_tukey_map_range():
    w = tukey_apodization(paper_probe(), 0.5)
    assert w.shape == (32, 32)
    assert w.min() >= 0 and w.max() <= 1
    np.testing.assert_allclose(w, w.T[::-1, ::-1].T[::-1, ::-1])


@given(
    st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9)),
    st.data(),
)
def test_grid_index_round_trip(dims, data):
    g = VoxelGrid((0, 0, 1e-3), (1e-4, 2e-4, 3e-4), dims)
    i = data.draw(st.integers(0, dims[0] - 1))
    j = data.draw(st.integers(0, dims[1] - 1))
    k = data.draw(st.integers(0, dims[2] - 1))
    idx = g.flatten(i, j, k)
    assert 0 <= idx < g.n_voxels
    assert tuple(int(v) for v in g.unflatten(idx)) == (i, j, k)


def test_grid_x_fastest():
    g = VoxelGrid((0, 0, 0), (1, 1, 1), (3, 4, 5))
    assert g.flatten(1, 0, 0) == 1
    assert g.flatten(0, 1, 0) == 3
    assert g.flatten(0, 0, 1) == 12


def test_grid_centered_and_refined():
    g = VoxelGrid.centered((0, 0, 20e-3), (2e-3, 2e-3, 12e-3), 50e-6)
    assert g.dims == (41, 41, 241)
    assert g.position(20, 20, 120) == pytest.approx([0, 0, 20e-3])
    r = g.refined(10)
    assert r.spacing == pytest.approx((5e-6,) * 3)
    assert r.dims == (410, 410, 2410)
    # fine voxels tile each coarse voxel symmetrically
    assert np.mean(r.axes()[0][:10]) == pytest.approx(g.axes()[0][0])


def test_grid_rejects_bad_spacing():
    with pytest.raises(ValueError):
        VoxelGrid((0, 0, 0), (0, 1, 1), (1, 1, 1))
