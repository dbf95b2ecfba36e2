import numpy as np
import pytest
from scipy.signal import hilbert

from oracles import FROZEN, hard_baffle
from usbf3d import AcquisitionConfig, Scene, add_white_noise, crossing_tubes, simulate_frame, simulate_tube_phantom_sequence
from usbf3d.simulator import (
    ChannelFrame,
    ChannelSequence,
    directivity,
    element_directivity,
    round_trip_waveform,
    synthesize_pulse,
)


def test_pulse_shape():
    p = synthesize_pulse(7.8e6, 2, 31.2e6)
    assert np.max(np.abs(p.samples)) == pytest.approx(1.0)
    assert p.sampling_frequency / p.center_frequency == FROZEN["samples_per_cycle"]
    assert p.duration == pytest.approx(2 / 7.8e6)
    # two cycles at four samples per cycle
    assert len(p.samples) == 9


def test_pulse_zero_crossings():
    f0, fs = 1e6, 64e6
    p = synthesize_pulse(f0, 2, fs).samples
    c = len(p) // 2
    core = p[c - 40 : c + 41]
    zc = np.where(np.diff(np.signbit(core)))[0]
    gaps = np.diff(zc)
    assert np.all(np.abs(gaps - fs / (2 * f0)) <= 1)


def test_pulse_window_edge_at_minus_40_db():
    f0, fs = 1e6, 1000e6
    p = synthesize_pulse(f0, 2, fs)
    t = (np.arange(len(p.samples)) - len(p.samples) // 2) / fs
    env = np.abs(p.samples) / np.abs(np.sin(2 * np.pi * f0 * t) + 1e-300)
    edge = env[1] / np.max(env[np.isfinite(env)])
    assert 20 * np.log10(edge) == pytest.approx(-40, abs=0.5)


def test_pulse_rejects_undersampling():
    with pytest.raises(ValueError):
        synthesize_pulse(7.8e6, 2, 15e6)


def test_directivity_broadside_and_grazing(probe):
    assert element_directivity(probe, 0, (0, 0, 1), 7.8e6) == pytest.approx(1.0)
    assert element_directivity(probe, 5, (1, 0, 0), 7.8e6) == pytest.approx(0.0)


def test_directivity_matches_oracle(probe):
    for deg in (0, 10, 25, 40):
        th = np.deg2rad(deg)
        d = (np.sin(th) * 0.6, np.sin(th) * 0.8, np.cos(th))
        assert element_directivity(probe, 3, d, 7.8e6) == pytest.approx(
            hard_baffle(probe.element_width, probe.element_height, d), rel=1e-12
        )


def test_directivity_monotone(probe):
    th = np.deg2rad(np.linspace(0, 30, 61))
    d = np.stack([np.sin(th), np.zeros_like(th), np.cos(th)], axis=1)
    v = directivity(probe, d, 7.8e6)
    assert np.all(np.diff(v) <= 1e-15)


def test_echo_arrival_on_axis(probe):
    acq = AcquisitionConfig.for_probe(probe, depth_range=(18e-3, 22e-3))
    frame = simulate_frame(Scene.from_arrays([[0, 0, 20e-3]], 1.0), probe, acq)
    centre = probe.element_index(16, 16)
    # echo centre = round trip + half the round-trip waveform
    rt = round_trip_waveform(synthesize_pulse(7.8e6, 2, acq.sampling_frequency))
    e = probe.element_positions[centre]
    tau = 20e-3 / 1540 + np.linalg.norm(np.array([0, 0, 20e-3]) - e) / 1540
    assert tau == pytest.approx(FROZEN["round_trip_20mm"], rel=1e-4)
    expected = tau + rt.peak_time
    env = np.abs(hilbert(frame.data[centre]))
    t_peak = frame.times()[np.argmax(env)]
    assert abs(t_peak - expected) <= 1 / acq.sampling_frequency


def test_empty_scene(small_probe, small_acq):
    f = simulate_frame(Scene(), small_probe, small_acq)
    assert not np.any(f.data)


def test_superposition_and_linearity(small_probe, small_acq):
    p = [[0.1e-3, -0.2e-3, 10e-3]]
    one = simulate_frame(Scene.from_arrays(p, 1.0), small_probe, small_acq).data
    halves = simulate_frame(Scene.from_arrays(p * 2, [0.5, 0.5]), small_probe, small_acq).data
    np.testing.assert_allclose(halves, one, rtol=0, atol=1e-12 * np.abs(one).max())
    scaled = simulate_frame(Scene.from_arrays(p, 3.0), small_probe, small_acq).data
    np.testing.assert_allclose(scaled, 3 * one, rtol=1e-12, atol=1e-15)
    q = [[-0.3e-3, 0.1e-3, 11e-3]]
    a = simulate_frame(Scene.from_arrays(q, 0.7), small_probe, small_acq).data
    both = simulate_frame(Scene.from_arrays(p + q, [1.0, 0.7]), small_probe, small_acq).data
    np.testing.assert_allclose(both, one + a, atol=1e-12 * np.abs(both).max())


def test_mirror_symmetry(small_probe, small_acq):
    g = small_probe
    left = simulate_frame(Scene.from_arrays([[-0.4e-3, 0, 10e-3]], 1.0), g, small_acq).data
    right = simulate_frame(Scene.from_arrays([[0.4e-3, 0, 10e-3]], 1.0), g, small_acq).data
    mirrored = np.array([g.element_index(r, g.cols - 1 - c) for r in range(g.rows) for c in range(g.cols)])
    np.testing.assert_allclose(right, left[mirrored], atol=1e-9 * np.abs(left).max())


def test_scatterer_behind_array(small_probe, small_acq):
    with pytest.raises(ValueError):
        simulate_frame(Scene.from_arrays([[0, 0, -1e-3]], 1.0), small_probe, small_acq)


def test_full_transmit_sum_agrees_on_axis(probe, acq):
    # the taper shortcut assumes a plane wave, which the full aperture provides
    slow = AcquisitionConfig.for_probe(probe, depth_range=acq.depth_range, full_transmit_sum=True)
    s = Scene.from_arrays([[0, 0, 20e-3]], 1.0)
    a = simulate_frame(s, probe, acq).data
    b = simulate_frame(s, probe, slow).data
    corr = np.sum(a * b) / np.sqrt(np.sum(a * a) * np.sum(b * b))
    assert corr > 0.99
    assert np.abs(b).max() == pytest.approx(np.abs(a).max(), rel=0.05)


def _frame(small_probe, small_acq):
    return simulate_frame(Scene.from_arrays([[0, 0, 10e-3]], 1.0), small_probe, small_acq)


def test_noise_vanishes_at_high_snr(small_probe, small_acq):
    f = _frame(small_probe, small_acq)
    n = add_white_noise(f, 300, 0)
    assert np.max(np.abs(n.data - f.data)) <= 1e-10 * np.max(np.abs(f.data))


def test_noise_snr_zero_db(probe, acq):
    f = simulate_frame(Scene.from_arrays([[0, 0, 20e-3]], 1.0), probe, acq)
    n = add_white_noise(f, 0.0, 7)
    support = np.abs(f.data) > 0.01 * np.abs(f.data).max()
    p_sig = np.mean(f.data[support] ** 2)
    p_noise = np.mean((n.data - f.data) ** 2)
    assert 10 * np.log10(p_sig / p_noise) == pytest.approx(0.0, abs=0.5)


def test_noise_deterministic(small_probe, small_acq):
    f = _frame(small_probe, small_acq)
    np.testing.assert_array_equal(add_white_noise(f, 10, 3).data, add_white_noise(f, 10, 3).data)
    assert not np.array_equal(add_white_noise(f, 10, 3).data, add_white_noise(f, 10, 4).data)


def test_noise_rejects_silent_frame():
    with pytest.raises(ValueError):
        add_white_noise(ChannelFrame(np.zeros((4, 8)), 0.0, 1e6), 10, 0)


def test_tube_geometry():
    a, b = crossing_tubes()
    assert a.radius == pytest.approx(100e-6)
    cos = float(a.axis @ b.axis)
    assert np.rad2deg(np.arccos(cos)) == pytest.approx(3.0)
    x = 2.25e-3
    sep = np.linalg.norm(a.center_at_x(x) - b.center_at_x(x))
    assert sep == pytest.approx(2 * np.tan(np.deg2rad(1.5)) * (x + 3.5e-3))


def test_tube_sequence_empty(small_probe, small_acq):
    a, b = crossing_tubes(crossing_point=(0, 0, 10e-3))
    seq, truth = simulate_tube_phantom_sequence(a, b, 0.0, 10e-3, 1, 0, small_probe, small_acq)
    assert len(seq) == 1 and truth.shape == (0, 5)
    assert not np.any(seq.data)


def test_tube_sequence_advection(small_probe, small_acq):
    a, b = crossing_tubes(crossing_point=(0, 0, 10e-3), length=2e-3, start_offset=-1e-3)
    seq, truth = simulate_tube_phantom_sequence(a, b, 0.3, 10e-3, 6, 5, small_probe, small_acq, prefill=False)
    assert seq.data.shape[:2] == (6, 64)
    # every bubble sits inside a lumen
    d = np.minimum(a.distance(truth[:, 1:4]), b.distance(truth[:, 1:4]))
    assert np.all(d <= a.radius + 1e-12)
    # a bubble present in consecutive frames moves one step along its tube
    step = 10e-3 / small_acq.frame_rate
    assert step == pytest.approx(FROZEN["advection_step"])
    f0 = truth[truth[:, 0] == 3, 1:4]
    f1 = truth[truth[:, 0] == 4, 1:4]
    if len(f0) and len(f1):
        dist = np.linalg.norm(f1[:, None] - f0[None], axis=2).min(axis=1)
        assert np.any(np.isclose(dist, step, rtol=1e-9))


def test_tube_sequence_parallel_equals_serial(small_probe, small_acq):
    a, b = crossing_tubes(crossing_point=(0, 0, 10e-3), length=2e-3, start_offset=-1e-3)
    s1, t1 = simulate_tube_phantom_sequence(a, b, 0.5, 10e-3, 5, 9, small_probe, small_acq, snr_db=10, workers=1)
    s2, t2 = simulate_tube_phantom_sequence(a, b, 0.5, 10e-3, 5, 9, small_probe, small_acq, snr_db=10, workers=3)
    np.testing.assert_array_equal(s1.data, s2.data)
    np.testing.assert_array_equal(t1, t2)


def test_sequence_container():
    frames = [ChannelFrame(np.full((2, 3), i, float), 1e-6, 1e6) for i in range(3)]
    seq = ChannelSequence.from_frames(frames, 100.0)
    assert len(seq) == 3
    np.testing.assert_array_equal(seq.frame(2).data, frames[2].data)
    with pytest.raises(ValueError):
        ChannelFrame(np.array([[np.nan]]), 0.0, 1e6)
