import numpy as np
import pytest

from oracles import FROZEN, circular_mean_phase, round_trip_time
from usbf3d import Scene, analytic_signal, gather_delayed_samples, receive_apodization, simulate_frame
from usbf3d.delayline import ApodizationVector, pulse_offset, round_trip_delay
from usbf3d.simulator import ChannelFrame


def _cosine(f=1e6, fs=20e6, n=400):
    t = np.arange(n) / fs
    return ChannelFrame(np.cos(2 * np.pi * f * t)[None, :], 0.0, fs), t


def test_analytic_signal_of_cosine():
    frame, t = _cosine()
    a = analytic_signal(frame).data[0]
    inner = slice(40, -40)
    np.testing.assert_allclose(np.abs(a[inner]), 1.0, atol=0.02)
    assert np.max(np.abs(a.real - frame.data[0])) < 1e-9
    q = np.sin(2 * np.pi * 1e6 * t)
    assert np.corrcoef(a.imag[inner], q[inner])[0, 1] > 0.999


def test_analytic_signal_one_sided(rng):
    frame = ChannelFrame(rng.standard_normal((3, 256)), 0.0, 1e6)
    spec = np.fft.fft(analytic_signal(frame).data, axis=1)
    neg = spec[:, 129:]
    assert np.max(np.abs(neg)) < 1e-9 * np.max(np.abs(spec))


def test_round_trip_delay_on_axis(probe, acq):
    centre = probe.element_index(16, 16)
    e = tuple(probe.element_positions[centre])
    tau = round_trip_delay((0, 0, 20e-3), centre, probe, acq)
    assert tau - pulse_offset(probe, acq) == pytest.approx(round_trip_time(20e-3, e), rel=1e-12)
    assert round_trip_time(20e-3) == pytest.approx(FROZEN["round_trip_20mm"])


def test_round_trip_delay_symmetry_and_monotone(probe, acq):
    a = probe.element_index(3, 5)
    b = probe.element_index(3, probe.cols - 1 - 5)
    assert round_trip_delay((0, 0, 20e-3), a, probe, acq) == pytest.approx(
        round_trip_delay((0, 0, 20e-3), b, probe, acq), rel=1e-14
    )
    taus = [round_trip_delay((1e-3, 0, z), a, probe, acq) for z in np.linspace(5e-3, 30e-3, 20)]
    assert np.all(np.diff(taus) > 0)


def test_apodization_deep_on_axis(probe, acq):
    a = receive_apodization((0, 0, 200e-3), probe, acq)
    assert np.all(a.a > 0.99)


def test_apodization_cuts_far_side(probe, acq):
    a = receive_apodization((4e-3, 0, 2e-3), probe, acq)
    far = probe.element_positions[:, 0] < -3e-3
    assert np.all(a.a[far] == 0)
    assert np.any(a.a > 0)


def test_apodization_values_in_range(probe, acq, rng):
    for _ in range(20):
        v = (rng.uniform(-5e-3, 5e-3), rng.uniform(-5e-3, 5e-3), rng.uniform(1e-3, 30e-3))
        a = receive_apodization(v, probe, acq).a
        assert np.all((a == 0) | ((a >= 0.5) & (a <= 1)))


def test_apodization_vector_rejects_out_of_range():
    with pytest.raises(ValueError):
        ApodizationVector(np.array([1.2]))


@pytest.fixture(scope="module")
def on_axis(probe, acq):
    frame = simulate_frame(Scene.from_arrays([[0, 0, 20e-3]], 1.0), probe, acq)
    return frame, analytic_signal(frame)


def test_focus_phases_concentrated(on_axis, probe, acq):
    _, af = on_axis
    v = (0, 0, 20e-3)
    s = gather_delayed_samples(af, v, probe, acq, receive_apodization(v, probe, acq))
    vals = s.s[s.valid_mask]
    mean = circular_mean_phase(vals)
    dev = np.angle(vals * np.exp(-1j * mean))
    assert np.all(np.abs(dev) <= np.pi / 4)


def test_out_of_range_voxel_is_zero(on_axis, probe, acq):
    _, af = on_axis
    v = (0, 0, 80e-3)
    s = gather_delayed_samples(af, v, probe, acq, receive_apodization(v, probe, acq))
    assert not s.valid_mask.any()
    assert not np.any(s.s)


def test_gather_linear(on_axis, probe, acq):
    frame, af = on_axis
    af2 = analytic_signal(ChannelFrame(2 * frame.data, frame.t0, frame.sampling_frequency))
    v = (0.1e-3, -0.05e-3, 20.02e-3)
    a = receive_apodization(v, probe, acq)
    np.testing.assert_allclose(
        gather_delayed_samples(af2, v, probe, acq, a).s, 2 * gather_delayed_samples(af, v, probe, acq, a).s, rtol=1e-12
    )


def test_gather_shift_equivariant(on_axis, probe, acq):
    frame, _ = on_axis
    fs = frame.sampling_frequency
    # delay the record by 7 samples; the dropped tail holds no echo
    assert not np.any(frame.data[:, -7:])
    data = np.concatenate([np.zeros((frame.n_elements, 7)), frame.data[:, :-7]], axis=1)
    shifted = ChannelFrame(data, frame.t0 - 7 / fs, fs)
    v = (0.2e-3, 0.1e-3, 20.0e-3)
    a = receive_apodization(v, probe, acq)
    s1 = gather_delayed_samples(analytic_signal(frame), v, probe, acq, a)
    s2 = gather_delayed_samples(analytic_signal(shifted), v, probe, acq, a)
    np.testing.assert_allclose(s2.s, s1.s, rtol=0, atol=1e-9 * np.abs(s1.s).max())


def test_coherent_sum_peaks_at_scatterer(on_axis, probe, acq):
    _, af = on_axis
    best, arg = -1.0, None
    h = 50e-6
    for dx in (-h, 0, h):
        for dy in (-h, 0, h):
            for dz in (-h, 0, h):
                v = (dx, dy, 20e-3 + dz)
                s = gather_delayed_samples(af, v, probe, acq, receive_apodization(v, probe, acq))
                val = abs(s.s.sum())
                if val > best:
                    best, arg = val, (dx, dy, dz)
    assert arg == (0, 0, 0)
