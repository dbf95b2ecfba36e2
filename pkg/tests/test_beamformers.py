import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.fft import next_fast_len

from oracles import FROZEN, cf as cf_oracle, cv as cv_oracle, root_sum
from usbf3d import (
    BeamformerKind,
    CapacityError,
    Scene,
    VoxelGrid,
    beamform_frame,
    beamform_volume,
    beamform_volumes,
    paper_scene_five_scatterers,
    simulate_frame,
)
from usbf3d.beamformers import (
    beamform_batch,
    beamform_frame_reference,
    cf_weight,
    coherence_maps,
    cv_weight,
    das,
    _pdas_band,
    pdas_accumulate,
    pdas_recover,
)
from usbf3d.delayline import ApodizationVector, DelayedSampleVector
from usbf3d.simulator import ChannelSequence, add_white_noise

F0, C = 7.8e6, 1540.0


def _vec(s):
    return DelayedSampleVector.from_values(s)


# ---------------------------------------------------------------- per-voxel rules


def test_das_examples(rng):
    assert das(_vec(np.ones(1024)), ApodizationVector.ones(1024)) == 1024 + 0j
    assert das(_vec(np.tile([1, -1], 512)), ApodizationVector.ones(1024)) == 0
    s = rng.standard_normal(64) + 1j * rng.standard_normal(64)
    assert das(_vec(s), ApodizationVector.ones(64)) == pytest.approx(s.sum())


def test_das_ignores_invalid_channels():
    s = DelayedSampleVector(np.array([1.0, 5.0]), np.array([True, False]))
    assert das(s, ApodizationVector(np.array([0.5, 1.0]))) == 0.5


def test_pdas_accumulate_examples(rng):
    x = rng.standard_normal((7, 33))
    sequential = [float(np.add.reduce(row, dtype=float)) for row in x]
    seq = []
    for row in x:
        acc = 0.0
        for v in row:
            acc += v
        seq.append(acc)
    np.testing.assert_array_equal(pdas_accumulate(x, 1.0), seq)
    np.testing.assert_allclose(pdas_accumulate(x, 1.0), sequential, rtol=1e-13)
    assert pdas_accumulate(np.array([16.0]), 4) == pytest.approx(FROZEN["root_16_p4"])
    assert pdas_accumulate(np.array([-16.0, 16.0]), 4) == 0.0
    line = rng.standard_normal(40)
    assert pdas_accumulate(line, 3) == pytest.approx(root_sum(line, 3), rel=1e-12)


def test_pdas_accumulate_rejects_complex():
    with pytest.raises(TypeError):
        pdas_accumulate(np.ones(3, complex), 4)


def test_pdas_recover_zero_line():
    out = pdas_recover(np.zeros(500), 4, F0, 1e-5)
    assert not np.any(out)


def test_pdas_recover_pure_fundamental():
    step = 1e-5
    z = np.arange(2000) * step
    line = np.cos(2 * np.pi * (2 * F0 / C) * z)
    # compressed samples whose 4th power is the sinusoid
    yhat = np.sign(line) * np.abs(line) ** 0.25
    env = pdas_recover(yhat, 4, F0, step)
    inner = env[300:-300]
    assert np.ptp(inner) / inner.mean() < 0.05


def test_pdas_recover_p1_is_bandpassed_envelope(rng):
    step = 1e-5
    y = rng.standard_normal(800)
    a = pdas_recover(y, 1, F0, step)
    fc = 2 * F0 / C
    sigma = 0.8 * fc / (2 * np.sqrt(2 * np.log(2)))
    n = len(y)
    pad = int(np.ceil(8 / (2 * np.pi * sigma * step)))
    nfft = next_fast_len(n + 2 * pad)
    f = np.fft.fftfreq(nfft, step)
    g = np.where(f > 0, 2 * np.exp(-0.5 * ((f - fc) / sigma) ** 2), 0)
    ref = np.abs(np.fft.ifft(np.fft.fft(y, nfft) * g)[:n])
    np.testing.assert_allclose(a, ref, rtol=1e-9, atol=1e-12)


def test_pdas_band_has_minus_6db_width():
    fc, sigma = _pdas_band(4, F0, 1e-5, C, 0.8)
    assert fc == pytest.approx(2 * F0 / C)
    gain = lambda f: np.exp(-0.5 * ((f - fc) / sigma) ** 2)
    assert 20 * np.log10(gain(1.4 * fc)) == pytest.approx(-6.02, abs=0.01)
    assert 20 * np.log10(gain(0.6 * fc)) == pytest.approx(-6.02, abs=0.01)


def test_pdas_coarse_step_rejected():
    with pytest.raises(ValueError, match="invalid configuration"):
        pdas_recover(np.zeros(10), 4, F0, 5e-5)


def test_cf_examples():
    assert cf_weight(_vec(np.full(8, 2 - 1j))) == pytest.approx(1.0)
    assert cf_weight(_vec([1, -1])) == pytest.approx(0.0)
    assert cf_weight(_vec([1, 1j])) == pytest.approx(FROZEN["cf_1_i"])
    assert cf_weight(_vec([0, 0])) == 0.0
    assert cf_weight(_vec([1, 1j]), normalized=False) == pytest.approx(1.0)


def test_cv_examples():
    one = ApodizationVector.ones(2)
    assert cv_weight(_vec([1, -1]), one) == 0.0
    assert cv_weight(_vec([2, 0]), one) == pytest.approx(FROZEN["cv_2_0"])
    s = _vec(np.full(16, 1.5))
    w = cv_weight(s, ApodizationVector.ones(16), epsilon=1e-10)
    assert w == pytest.approx(abs(16 * 1.5) ** 2 / (1e-10 * 16 * 1.5**2))
    assert cv_weight(DelayedSampleVector(np.array([1.0, 2.0]), np.array([True, False])), one) == 0.0


def test_cv_inverse_apodization():
    s = np.array([1.0, 0.5 + 0.2j, 0.7])
    a = np.array([1.0, 0.5, 0.8])
    assert cv_weight(_vec(s), ApodizationVector(a), True) == pytest.approx(cv_oracle(s, a, True))
    assert cv_weight(_vec(s), ApodizationVector(a), False) == pytest.approx(cv_oracle(s, a, False))


_complex = st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(_complex, min_size=2, max_size=40), _complex)
def test_weight_properties(values, scale):
    s = np.asarray(values)
    if not np.any(np.abs(s) > 1e-6) or abs(scale) < 1e-3:
        return
    v = _vec(s)
    w = cf_weight(v)
    assert 0.0 <= w <= 1.0 + 1e-12
    assert w == pytest.approx(cf_oracle(s), rel=1e-9, abs=1e-12)
    assert cf_weight(_vec(scale * s)) == pytest.approx(w, rel=1e-9, abs=1e-12)
    a = ApodizationVector.ones(len(s))
    c = cv_weight(v, a)
    assert np.isfinite(c) and c >= 0
    assert cv_weight(_vec(scale * s), a) == pytest.approx(c, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------- volume driver


@pytest.fixture(scope="module")
def five_frame(probe):
    from usbf3d import AcquisitionConfig

    acq = AcquisitionConfig.for_probe(probe, depth_range=(14e-3, 26e-3))
    return simulate_frame(paper_scene_five_scatterers(), probe, acq), acq


def test_middle_scatterer_centred(five_frame, probe):
    frame, acq = five_frame
    grid = VoxelGrid.centered((0, 0, 20e-3), (0.5e-3, 0.5e-3, 0.5e-3), 50e-6)
    vol = beamform_frame(frame, grid, ["das"], probe, acq)["das"]
    peak = np.array(np.unravel_index(np.argmax(vol), vol.shape))
    assert np.all(np.abs(peak - np.array(grid.dims) // 2) <= 1)


def test_zero_sequence_gives_zero_volumes(small_probe, small_acq):
    seq = ChannelSequence(np.zeros((2, 64, 300)), 1e-5, small_acq.sampling_frequency, 500.0)
    grid = VoxelGrid.centered((0, 0, 10e-3), (0.2e-3, 0.2e-3, 0.2e-3), 50e-6)
    for kind in ("das", "cf", "cvn", "cv", "pdas"):
        vols = beamform_volume(seq, grid, kind, small_probe, small_acq)
        assert len(vols) == 2 and all(not np.any(v.values) for v in vols)


def test_cf_below_das(five_frame, probe):
    frame, acq = five_frame
    grid = VoxelGrid.centered((0, 0, 20e-3), (1e-3, 1e-3, 1e-3), 100e-6)
    v = beamform_frame(add_white_noise(frame, 10, 0), grid, ["das", "cf"], probe, acq)
    assert np.all(v["cf"] <= v["das"] * (1 + 1e-12))


def test_cv_exceeds_cf_at_focus(five_frame, probe):
    frame, acq = five_frame
    grid = VoxelGrid((0, 0, 20e-3), (50e-6,) * 3, (1, 1, 1))
    m = coherence_maps(frame, grid, probe, acq)
    assert m["cf_weight"][0, 0, 0] >= 0.8
    assert m["cv_weight"][0, 0, 0] >= m["cf_weight"][0, 0, 0]


@pytest.mark.parametrize("kind", ["das", "cf", "cvn", "cv", "pdas"])
def test_driver_matches_reference_small(kind, small_probe, small_acq):
    frame = add_white_noise(
        simulate_frame(Scene.from_arrays([[0.05e-3, -0.05e-3, 10e-3]], 1.0), small_probe, small_acq), 10, 1
    )
    grid = VoxelGrid.centered((0, 0, 10e-3), (0.2e-3, 0.2e-3, 0.3e-3), 50e-6)
    fast = beamform_frame(frame, grid, [kind], small_probe, small_acq, workers=2)[kind]
    ref = beamform_frame_reference(frame, grid, kind, small_probe, small_acq)
    np.testing.assert_allclose(fast, ref, rtol=1e-6, atol=1e-9 * ref.max())


def test_batch_equals_single_frames(small_probe, small_acq):
    frames = [
        add_white_noise(simulate_frame(Scene.from_arrays([[0, 0, 10e-3]], 1.0), small_probe, small_acq), 5, s)
        for s in range(3)
    ]
    grid = VoxelGrid.centered((0, 0, 10e-3), (0.2e-3, 0.2e-3, 0.2e-3), 50e-6)
    kinds = ["das", "cf", "cvn", "cv", "pdas"]
    batch = beamform_batch(frames, grid, kinds, small_probe, small_acq)
    for i, f in enumerate(frames):
        single = beamform_frame(f, grid, kinds, small_probe, small_acq)
        for k in kinds:
            np.testing.assert_array_equal(batch[k][i], single[k])


def test_sequence_normalization(small_probe, small_acq):
    frames = [
        simulate_frame(Scene.from_arrays([[0, 0, 10e-3]], c), small_probe, small_acq).data for c in (1.0, 2.0)
    ]
    seq = ChannelSequence(np.array(frames), simulate_frame(Scene(), small_probe, small_acq).t0, small_acq.sampling_frequency, 500.0)
    grid = VoxelGrid.centered((0, 0, 10e-3), (0.2e-3, 0.2e-3, 0.2e-3), 50e-6)
    vols = beamform_volume(seq, grid, "das", small_probe, small_acq, normalize=True)
    assert max(v.values.max() for v in vols) == pytest.approx(1.0)
    assert vols[0].values.max() == pytest.approx(0.5, rel=1e-9)
    assert vols[0].normalization == vols[1].normalization > 0


def test_capacity_error(small_probe, small_acq):
    seq = ChannelSequence(np.zeros((2, 64, 300)), 1e-5, small_acq.sampling_frequency, 500.0)
    grid = VoxelGrid.centered((0, 0, 10e-3), (1e-3, 1e-3, 1e-3), 50e-6)
    with pytest.raises(CapacityError) as err:
        beamform_volume(seq, grid, "das", small_probe, small_acq, memory_limit=1000)
    assert err.value.required > err.value.available == 1000


def test_pdas_coarse_grid_rejected(small_probe, small_acq):
    seq = ChannelSequence(np.zeros((1, 64, 300)), 1e-5, small_acq.sampling_frequency, 500.0)
    grid = VoxelGrid.centered((0, 0, 10e-3), (0.2e-3, 0.2e-3, 0.2e-3), 50e-6)
    kind = BeamformerKind("pdas", axial_step=5e-5)
    with pytest.raises(ValueError, match="invalid configuration"):
        beamform_volume(seq, grid, kind, small_probe, small_acq)


def test_kind_validation():
    with pytest.raises(ValueError, match="valid"):
        BeamformerKind("mv")
    with pytest.raises(ValueError):
        BeamformerKind("pdas", p=0.5)
    with pytest.raises(ValueError):
        BeamformerKind("cv", epsilon=0)
    assert BeamformerKind.parse("CV").label == "CV"


def test_timing_recorded(small_probe, small_acq):
    seq = ChannelSequence(np.zeros((2, 64, 300)), 1e-5, small_acq.sampling_frequency, 500.0)
    grid = VoxelGrid.centered((0, 0, 10e-3), (0.1e-3, 0.1e-3, 0.1e-3), 50e-6)
    vols = beamform_volumes(seq, grid, ["das", "cf"], small_probe, small_acq, batch=1)
    assert all(v.elapsed > 0 for v in vols["das"])
