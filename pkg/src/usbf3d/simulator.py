"""Single-scattering time-of-flight simulator for 0-degree plane-wave transmits.

Echoes are the round-trip waveform (transmit pulse convolved with the receive
pulse) delayed by ``z/c + |r - p_n|/c`` and weighted by the transmit field,
the receive element directivity and 1/r spreading on receive.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numba
import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.signal import hilbert

from .core import AcquisitionConfig, ArrayGeometry, Scene

logger = logging.getLogger(__name__)

__all__ = [
    "PulseWaveform",
    "RoundTripWaveform",
    "ChannelFrame",
    "ChannelSequence",
    "Tube",
    "synthesize_pulse",
    "round_trip_waveform",
    "element_directivity",
    "directivity",
    "recording_window",
    "simulate_frame",
    "add_white_noise",
    "simulate_tube_phantom_sequence",
    "crossing_tubes",
]

# Gaussian window edge sits at -40 dB: exp(-k^2 / 2) = 1e-2
_GAUSS_K = np.sqrt(2 * np.log(100.0))
_OVERSAMPLE = 16


@dataclass(frozen=True)
class PulseWaveform:
    samples: np.ndarray = field(repr=False)
    sampling_frequency: float
    center_frequency: float
    cycles: int

    @property
    def duration(self) -> float:
        return self.cycles / self.center_frequency


def _pulse_samples(f0: float, cycles: int, fs: float) -> np.ndarray:
    half = cycles / (2 * f0)
    sigma = half / _GAUSS_K
    n_half = int(np.floor(half * fs + 1e-9))
    t = np.arange(-n_half, n_half + 1) / fs
    p = np.sin(2 * np.pi * f0 * t) * np.exp(-(t**2) / (2 * sigma**2))
    return p / np.max(np.abs(p))


def synthesize_pulse(f0: float, cycles: int, fs: float) -> PulseWaveform:
    """Gaussian-windowed sinusoid spanning ``cycles`` periods, peak normalised to 1."""
    if fs <= 2 * f0:
        raise ValueError(f"sampling frequency {fs:g} Hz must exceed 2 x f0 = {2 * f0:g} Hz")
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    samples = _pulse_samples(f0, cycles, fs)
    samples.setflags(write=False)
    return PulseWaveform(samples, float(fs), float(f0), int(cycles))


@dataclass(frozen=True)
class RoundTripWaveform:
    """Transmit-receive response tabulated on a fine time grid starting at t=0."""

    table: np.ndarray = field(repr=False)
    dt: float
    peak_time: float

    @property
    def duration(self) -> float:
        return (len(self.table) - 1) * self.dt


@lru_cache(maxsize=16)
def _round_trip_cached(f0: float, cycles: int, fs: float) -> RoundTripWaveform:
    fine_fs = fs * _OVERSAMPLE
    p = _pulse_samples(f0, cycles, fine_fs)
    rt = np.convolve(p, p)
    rt /= np.max(np.abs(rt))
    env = np.abs(hilbert(np.pad(rt, 64)))[64:-64]
    k = int(np.argmax(env))
    frac = 0.0
    if 0 < k < len(env) - 1:
        a, b, c = env[k - 1], env[k], env[k + 1]
        den = a - 2 * b + c
        if den != 0:
            frac = 0.5 * (a - c) / den
    rt.setflags(write=False)
    return RoundTripWaveform(rt, 1.0 / fine_fs, (k + frac) / fine_fs)


def round_trip_waveform(pulse: PulseWaveform) -> RoundTripWaveform:
    """Pulse convolved with itself, oversampled 16x for sub-sample placement."""
    return _round_trip_cached(pulse.center_frequency, pulse.cycles, pulse.sampling_frequency)


@dataclass(frozen=True)
class ChannelFrame:
    """Raw RF of one transmit event, shape (n_elements, n_samples)."""

    data: np.ndarray = field(repr=False)
    t0: float
    sampling_frequency: float

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError("channel data must be 2D (elements x samples)")
        if not np.all(np.isfinite(data)):
            raise ValueError("channel data contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def n_elements(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_samples) / self.sampling_frequency


@dataclass(frozen=True)
class ChannelSequence:
    """Frames stacked in a (n_frames, n_elements, n_samples) array."""

    data: np.ndarray = field(repr=False)
    t0: float
    sampling_frequency: float
    frame_rate: float

    def __post_init__(self):
        if np.ndim(self.data) != 3:
            raise ValueError("sequence data must be 3D (frames x elements x samples)")

    @classmethod
    def from_frames(cls, frames: Sequence[ChannelFrame], frame_rate: float, dtype=np.float64):
        if not frames:
            raise ValueError("a sequence needs at least one frame")
        first = frames[0]
        for f in frames[1:]:
            if f.data.shape != first.data.shape or f.sampling_frequency != first.sampling_frequency:
                raise ValueError("all frames must share N, T and sampling frequency")
            if f.t0 != first.t0:
                raise ValueError("all frames must share t0")
        data = np.stack([np.asarray(f.data, dtype=dtype) for f in frames])
        return cls(data, first.t0, first.sampling_frequency, float(frame_rate))

    def __len__(self):
        return self.data.shape[0]

    def frame(self, i: int) -> ChannelFrame:
        return ChannelFrame(np.asarray(self.data[i], dtype=np.float64), self.t0, self.sampling_frequency)

    @property
    def frames(self) -> list[ChannelFrame]:
        return [self.frame(i) for i in range(len(self))]


def directivity(
    geom: ArrayGeometry, directions: np.ndarray, f: float, c: float = 1540.0
) -> np.ndarray:
    """Hard-baffle rectangular element directivity for unit ``directions`` (..., 3)."""
    d = np.asarray(directions, dtype=float)
    ux, uy, uz = d[..., 0], d[..., 1], d[..., 2]
    k = f / c
    out = np.sinc(geom.element_width * ux * k) * np.sinc(geom.element_height * uy * k) * uz
    return np.clip(out, 0.0, 1.0)


def element_directivity(
    geom: ArrayGeometry, n: int, direction, f: float, c: float = 1540.0
) -> float:
    """Directivity of element ``n`` toward a unit ``direction``.

    All elements share one shape, so ``n`` only selects which element is meant.
    """
    if not 0 <= n < geom.n_elements:
        raise IndexError(f"element index {n} out of range")
    d = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(d) - 1) > 1e-9:
        raise ValueError("direction must be a unit vector")
    return float(directivity(geom, d, f, c))


def recording_window(geom: ArrayGeometry, acq: AcquisitionConfig, pulse: PulseWaveform):
    """Return (t0, n_samples) covering echoes from ``acq.depth_range``."""
    c = acq.speed_of_sound
    fs = acq.sampling_frequency
    z0, z1 = acq.depth_range
    ax, ay = geom.aperture
    far = np.sqrt(z1**2 + ax**2 + ay**2)
    rt = round_trip_waveform(pulse)
    t_start = np.floor(2 * z0 / c * fs) / fs
    t_stop = (z1 + far) / c + rt.duration
    n = int(np.ceil((t_stop - t_start) * fs)) + 1
    return float(t_start), n


def transmit_field_weight(
    positions: np.ndarray, geom: ArrayGeometry, acq: AcquisitionConfig
) -> np.ndarray:
    """Transmit taper evaluated at the scatterers' projected aperture coordinates."""
    apod = acq.apodization_map(geom)
    ys = (np.arange(geom.rows) - (geom.rows - 1) / 2) * geom.pitch_y
    xs = (np.arange(geom.cols) - (geom.cols - 1) / 2) * geom.pitch_x
    if geom.rows == 1 or geom.cols == 1:
        # degenerate axis: nearest-element lookup along it
        iy = np.clip(np.rint(positions[:, 1] / geom.pitch_y + (geom.rows - 1) / 2), 0, geom.rows - 1)
        ix = np.clip(np.rint(positions[:, 0] / geom.pitch_x + (geom.cols - 1) / 2), 0, geom.cols - 1)
        return apod[iy.astype(int), ix.astype(int)]
    interp = RegularGridInterpolator((ys, xs), apod, bounds_error=False, fill_value=0.0)
    return interp(positions[:, [1, 0]])


@numba.njit(cache=True, nogil=True)
def _splat(out, t0, fs, taus, amps, table, dt):
    # out[n, k] += amps[j, n] * table(t_k - taus[j, n]), linear interpolation
    n_sc, n_el = taus.shape
    n_t = out.shape[1]
    dur = (table.shape[0] - 1) * dt
    for j in range(n_sc):
        for n in range(n_el):
            a = amps[j, n]
            if a == 0.0:
                continue
            tau = taus[j, n]
            k0 = int(np.ceil((tau - t0) * fs))
            if k0 < 0:
                k0 = 0
            k1 = int(np.floor((tau + dur - t0) * fs))
            if k1 > n_t - 1:
                k1 = n_t - 1
            for k in range(k0, k1 + 1):
                u = (t0 + k / fs - tau) / dt
                if u < 0.0:
                    continue
                m = int(u)
                if m >= table.shape[0] - 1:
                    if m == table.shape[0] - 1:
                        out[n, k] += a * table[m]
                    continue
                w = u - m
                out[n, k] += a * ((1.0 - w) * table[m] + w * table[m + 1])


def _echo_geometry(positions, geom: ArrayGeometry, acq: AcquisitionConfig):
    c = acq.speed_of_sound
    diff = positions[:, None, :] - geom.element_positions[None, :, :]
    r = np.linalg.norm(diff, axis=-1)
    d = directivity(geom, diff / r[..., None], geom.center_frequency, c)
    return r, d


def _full_transmit_echoes(out, t0, fs, positions, coefs, geom, acq, rt):
    """Reference path: transmit field summed over every element (Rayleigh integral)."""
    c = acq.speed_of_sound
    w = acq.apodization_map(geom).ravel()
    area = geom.pitch_x * geom.pitch_y
    deriv = np.gradient(rt.table, rt.dt)
    r, d = _echo_geometry(positions, geom, acq)
    for j in range(len(positions)):
        rj = r[j]
        t_lo = rj.min() / c
        t_hi = rj.max() / c + rt.duration
        tf = t_lo + np.arange(int(np.ceil((t_hi - t_lo) / rt.dt)) + 2) * rt.dt
        fieldwave = np.zeros(len(tf))
        for m in np.nonzero(w)[0]:
            fieldwave += w[m] * area / rj[m] * np.interp(
                tf - rj[m] / c, np.arange(len(deriv)) * rt.dt, deriv, left=0.0, right=0.0
            )
        fieldwave /= 2 * np.pi * c
        t_samples = t0 + np.arange(out.shape[1]) / fs
        for n in range(len(rj)):
            if d[j, n] == 0:
                continue
            out[n] += coefs[j] * d[j, n] / rj[n] * np.interp(
                t_samples - rj[n] / c, tf, fieldwave, left=0.0, right=0.0
            )


def simulate_frame(
    scene: Scene,
    geom: ArrayGeometry,
    acq: AcquisitionConfig,
    pulse: Optional[PulseWaveform] = None,
    frame_index: int = 0,
) -> ChannelFrame:
    """Render the channel RF of one plane-wave transmission of ``scene``."""
    acq.validate_for(geom)
    if pulse is None:
        pulse = synthesize_pulse(geom.center_frequency, acq.pulse_cycles, acq.sampling_frequency)
    fs = acq.sampling_frequency
    t0, n_t = recording_window(geom, acq, pulse)
    out = np.zeros((geom.n_elements, n_t))
    if len(scene) == 0:
        return ChannelFrame(out, t0, fs)

    positions = scene.positions(frame_index)
    if np.any(positions[:, 2] <= 0):
        raise ValueError("scatterers must lie in front of the array (z > 0)")
    coefs = scene.coefficients()
    rt = round_trip_waveform(pulse)

    if acq.full_transmit_sum:
        _full_transmit_echoes(out, t0, fs, positions, coefs, geom, acq, rt)
        return ChannelFrame(out, t0, fs)

    c = acq.speed_of_sound
    r, d = _echo_geometry(positions, geom, acq)
    a_tx = transmit_field_weight(positions, geom, acq)
    taus = positions[:, 2:3] / c + r / c
    amps = coefs[:, None] * a_tx[:, None] * d / r
    _splat(out, t0, fs, np.ascontiguousarray(taus), np.ascontiguousarray(amps), rt.table, rt.dt)
    return ChannelFrame(out, t0, fs)


def _signal_power(clean: np.ndarray) -> float:
    peak = np.max(np.abs(clean))
    support = np.abs(clean) > 0.01 * peak
    return float(np.mean(clean[support] ** 2))


def add_white_noise(
    frame: ChannelFrame, snr_db: float, seed, signal_power: Optional[float] = None
) -> ChannelFrame:
    """Add white Gaussian noise at ``snr_db`` relative to the frame's signal power.

    Signal power is measured over samples above 1% of the clean peak. ``seed``
    may be anything accepted by ``np.random.default_rng``.
    """
    if signal_power is None:
        if not np.any(frame.data):
            raise ValueError("SNR is undefined for an all-zero frame")
        signal_power = _signal_power(frame.data)
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(signal_power / 10 ** (snr_db / 10))
    noisy = frame.data + sigma * rng.standard_normal(frame.data.shape)
    return ChannelFrame(noisy, frame.t0, frame.sampling_frequency)


# ---------------------------------------------------------------------------
# crossing-tube phantom


@dataclass(frozen=True)
class Tube:
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    radius: float

    @property
    def axis(self) -> np.ndarray:
        v = np.subtract(self.end, self.start)
        return v / np.linalg.norm(v)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.end, self.start)))

    def distance(self, points) -> np.ndarray:
        """Distance of ``points`` from the (infinite) tube axis."""
        p = np.atleast_2d(points) - np.asarray(self.start)
        along = p @ self.axis
        return np.linalg.norm(p - along[:, None] * self.axis, axis=1)

    def center_at_x(self, x: float) -> np.ndarray:
        a = self.axis
        s = (x - self.start[0]) / a[0]
        return np.asarray(self.start) + s * a


def crossing_tubes(
    crossing_point=(-3.5e-3, 0.0, 20e-3),
    angle_deg: float = 3.0,
    length: float = 9.0e-3,
    start_offset: float = -1.0e-3,
    radius: float = 100e-6,
) -> tuple[Tube, Tube]:
    """Two straight tubes running along +x that cross at ``angle_deg``.

    The tubes lie in the z = const plane, symmetric about the x axis through
    ``crossing_point``; their centre-to-centre separation grows as
    ``2 tan(angle/2) * (x - x_cross)``.
    """
    half = np.deg2rad(angle_deg) / 2
    cp = np.asarray(crossing_point, dtype=float)
    tubes = []
    for sgn in (-1.0, 1.0):
        d = np.array([np.cos(half), sgn * np.sin(half), 0.0])
        tubes.append(Tube(tuple(cp + start_offset * d), tuple(cp + (start_offset + length) * d), radius))
    return tubes[0], tubes[1]


def _perp_basis(axis):
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def _bubble_tracks(tubes, bubble_rate, step, n_frames, rng, prefill):
    """Per-frame bubble positions for every tube; advection along the axis."""
    per_frame = [[] for _ in range(n_frames)]
    for tube in tubes:
        axis = tube.axis
        e1, e2 = _perp_basis(axis)
        length = tube.length
        transit = length / step if step > 0 else np.inf
        births = []
        if prefill and bubble_rate > 0 and np.isfinite(transit):
            n0 = rng.poisson(bubble_rate * transit)
            births += [(-float(s) / step) for s in rng.uniform(0, length, n0)]
        for f in range(n_frames):
            births += list(f + rng.uniform(0, 1, rng.poisson(bubble_rate)))
        births.sort()
        for b in births:
            rho = tube.radius * np.sqrt(rng.uniform())
            phi = rng.uniform(0, 2 * np.pi)
            offset = rho * (np.cos(phi) * e1 + np.sin(phi) * e2)
            f_first = max(0, int(np.ceil(b)))
            for f in range(f_first, n_frames):
                s = (f - b) * step
                if s > length:
                    break
                per_frame[f].append(np.asarray(tube.start) + s * axis + offset)
    return per_frame


def _run(fn, n, workers):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(fn, range(n)))
    else:
        for i in range(n):
            fn(i)


def simulate_tube_phantom_sequence(
    tube_a: Tube,
    tube_b: Tube,
    bubble_rate: float,
    speed: float,
    n_frames: int,
    seed: int,
    geom: ArrayGeometry,
    acq: AcquisitionConfig,
    snr_db: Optional[float] = None,
    static_scene: Optional[Scene] = None,
    prefill: bool = True,
    workers: int = 1,
    dtype=np.float32,
):
    """Microbubbles flowing through two crossing tubes.

    Bubbles arrive at each tube inlet as a Poisson process with mean
    ``bubble_rate`` per frame, sit at a uniformly random radial offset inside
    the lumen and move ``speed / frame_rate`` along the axis each frame. With
    ``prefill`` the tubes start in their steady state instead of empty.

    Returns the channel sequence and an (n_rows, 5) ground-truth array of
    ``(frame, x, y, z, coefficient)``.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    step = speed / acq.frame_rate
    tracks = _bubble_tracks((tube_a, tube_b), bubble_rate, step, n_frames, rng, prefill)
    pulse = synthesize_pulse(geom.center_frequency, acq.pulse_cycles, acq.sampling_frequency)
    t0, n_t = recording_window(geom, acq, pulse)

    static_frame = None
    if static_scene is not None and len(static_scene):
        static_frame = simulate_frame(static_scene, geom, acq, pulse).data

    data = np.zeros((n_frames, geom.n_elements, n_t), dtype=dtype)

    def render(f):
        pos = tracks[f]
        if pos:
            frame = simulate_frame(Scene.from_arrays(np.array(pos), 1.0), geom, acq, pulse).data
        else:
            frame = np.zeros((geom.n_elements, n_t))
        if static_frame is not None:
            frame = frame + static_frame
        data[f] = frame

    def noisify(f, power):
        # per-frame stream keyed on (seed, frame) so parallel rendering is deterministic
        ss = np.random.SeedSequence([seed, f])
        clean = ChannelFrame(np.asarray(data[f], dtype=np.float64), t0, acq.sampling_frequency)
        data[f] = add_white_noise(clean, snr_db, ss, power).data

    _run(render, n_frames, workers)
    if snr_db is not None:
        powers = [_signal_power(data[f].astype(np.float64)) for f in range(n_frames) if np.any(data[f])]
        if powers:
            power = float(np.mean(powers))
            _run(lambda f: noisify(f, power), n_frames, workers)

    rows = [(f, *p, 1.0) for f in range(n_frames) for p in tracks[f]]
    truth = np.array(rows, dtype=float).reshape(-1, 5)
    seq = ChannelSequence(data, t0, acq.sampling_frequency, acq.frame_rate)
    return seq, truth
