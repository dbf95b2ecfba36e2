"""Analytic signals, plane-wave delays, receive apodization and sample gathering.

Sub-sample interpolation is linear on the basebanded analytic signal followed
by remodulation at the carrier, which keeps the carrier phase exact between
samples even at 4 samples per period.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import hilbert

from .core import AcquisitionConfig, ArrayGeometry
from .simulator import ChannelFrame, directivity, round_trip_waveform, synthesize_pulse

__all__ = [
    "AnalyticFrame",
    "DelayedSampleVector",
    "ApodizationVector",
    "SENSITIVITY_CUTOFF",
    "analytic_signal",
    "pulse_offset",
    "round_trip_delay",
    "receive_apodization",
    "gather_delayed_samples",
]

SENSITIVITY_CUTOFF = 0.5


@dataclass(frozen=True)
class AnalyticFrame:
    data: np.ndarray = field(repr=False)
    t0: float
    sampling_frequency: float
    _baseband: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def baseband(self, f0: float) -> np.ndarray:
        """Demodulate by ``exp(-j 2 pi f0 t)`` on the absolute time axis (cached)."""
        if f0 not in self._baseband:
            t = self.t0 + np.arange(self.n_samples) / self.sampling_frequency
            bb = np.ascontiguousarray(self.data * np.exp(-2j * np.pi * f0 * t)[None, :])
            bb.setflags(write=False)
            self._baseband[f0] = bb
        return self._baseband[f0]


@dataclass(frozen=True)
class DelayedSampleVector:
    """Delay-cancelled channel samples for one voxel; masked entries are zero."""

    s: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=complex)
        mask = np.asarray(self.valid_mask, dtype=bool)
        if s.shape != mask.shape:
            raise ValueError("s and valid_mask must have the same length")
        s = np.where(mask, s, 0)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "valid_mask", mask)

    @classmethod
    def from_values(cls, s) -> "DelayedSampleVector":
        s = np.asarray(s, dtype=complex)
        return cls(s, np.ones(s.shape, dtype=bool))

    def __len__(self):
        return len(self.s)


@dataclass(frozen=True)
class ApodizationVector:
    """Receive weights, either exactly 0 or in [cutoff, 1]."""

    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("apodization weights must lie in [0, 1]")
        object.__setattr__(self, "a", a)

    @classmethod
    def ones(cls, n: int) -> "ApodizationVector":
        return cls(np.ones(n))

    @property
    def mask(self) -> np.ndarray:
        return self.a > 0


def analytic_signal(frame: ChannelFrame) -> AnalyticFrame:
    """Per-channel analytic signal via the one-sided spectrum construction."""
    if frame.n_samples < 2:
        raise ValueError("need at least 2 samples per channel")
    return AnalyticFrame(hilbert(np.asarray(frame.data, dtype=float), axis=-1), frame.t0, frame.sampling_frequency)


def pulse_offset(geom: ArrayGeometry, acq: AcquisitionConfig) -> float:
    """Envelope-peak time of the round-trip waveform; centres the PSF on the scatterer."""
    pulse = synthesize_pulse(geom.center_frequency, acq.pulse_cycles, acq.sampling_frequency)
    return round_trip_waveform(pulse).peak_time


def round_trip_delay(voxel, n: int, geom: ArrayGeometry, acq: AcquisitionConfig) -> float:
    """Plane-wave transmit plus spherical receive delay for element ``n``."""
    v = np.asarray(voxel, dtype=float)
    if v[2] <= 0:
        raise ValueError("voxel must lie in front of the array (z > 0)")
    c = acq.speed_of_sound
    r = np.linalg.norm(v - geom.element_positions[n])
    return v[2] / c + r / c + pulse_offset(geom, acq)


def receive_apodization(
    voxel, geom: ArrayGeometry, acq: AcquisitionConfig, cutoff: float = SENSITIVITY_CUTOFF
) -> ApodizationVector:
    """Element sensitivity toward ``voxel``; values below ``cutoff`` are zeroed."""
    v = np.asarray(voxel, dtype=float)
    if v[2] <= 0:
        raise ValueError("voxel must lie in front of the array (z > 0)")
    diff = v[None, :] - geom.element_positions
    r = np.linalg.norm(diff, axis=1)
    a = directivity(geom, diff / r[:, None], geom.center_frequency, acq.speed_of_sound)
    return ApodizationVector(np.where(a < cutoff, 0.0, a))


def gather_delayed_samples(
    aframe: AnalyticFrame,
    voxel,
    geom: ArrayGeometry,
    acq: AcquisitionConfig,
    apod: ApodizationVector,
) -> DelayedSampleVector:
    """Sample every channel at its round-trip delay to ``voxel``."""
    v = np.asarray(voxel, dtype=float)
    c = acq.speed_of_sound
    fs = aframe.sampling_frequency
    omega = 2 * np.pi * geom.center_frequency
    r = np.linalg.norm(v[None, :] - geom.element_positions, axis=1)
    tau = v[2] / c + r / c + pulse_offset(geom, acq)

    u = (tau - aframe.t0) * fs
    n_t = aframe.n_samples
    valid = (u >= 0) & (u <= n_t - 1) & apod.mask
    k = np.clip(np.floor(u), 0, n_t - 1).astype(int)
    k1 = np.minimum(k + 1, n_t - 1)
    w = np.clip(u - k, 0.0, 1.0)
    bb = aframe.baseband(geom.center_frequency)
    rows = np.arange(len(r))
    s = ((1 - w) * bb[rows, k] + w * bb[rows, k1]) * np.exp(1j * omega * tau)
    return DelayedSampleVector(np.where(valid, s, 0), valid)
