"""Per-voxel reduction rules and the volume driver.

DAS sums apodized delay-cancelled channels. CF and CV/CV_N multiply the DAS
envelope by a coherence weight computed from the same channel samples.
p-DAS compresses real RF samples per channel, sums, re-expands and band-pass
filters along depth on a fine axial grid before taking the envelope.

The volume driver runs compiled kernels over fixed blocks of (x, y) columns.
Each voxel's channel sum is accumulated in element order whatever the worker
count, so results do not depend on the number of threads.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.fft import next_fast_len

from . import _kernels
from .core import AcquisitionConfig, ArrayGeometry, VoxelGrid
from .delayline import (
    SENSITIVITY_CUTOFF,
    AnalyticFrame,
    ApodizationVector,
    DelayedSampleVector,
    analytic_signal,
    gather_delayed_samples,
    pulse_offset,
    receive_apodization,
)
from .simulator import ChannelFrame, ChannelSequence

logger = logging.getLogger(__name__)

__all__ = [
    "VARIANTS",
    "PDAS_MAX_AXIAL_STEP",
    "BeamformerKind",
    "BeamformedVolume",
    "CapacityError",
    "das",
    "pdas_accumulate",
    "pdas_recover",
    "cf_weight",
    "cv_weight",
    "beamform_volume",
    "beamform_volumes",
    "beamform_frame",
    "beamform_batch",
    "beamform_frame_reference",
    "coherence_maps",
]

VARIANTS = ("das", "pdas", "cf", "cvn", "cv")
PDAS_MAX_AXIAL_STEP = 1e-5
CHUNK_COLUMNS = 16
BATCH_FRAMES = 8


class CapacityError(MemoryError):
    """The requested reconstruction does not fit in the memory budget."""

    def __init__(self, required: int, available: int):
        self.required = int(required)
        self.available = int(available)
        super().__init__(
            f"reconstruction needs ~{self.required / 2**20:.1f} MiB "
            f"but only {self.available / 2**20:.1f} MiB is available"
        )


@dataclass(frozen=True)
class BeamformerKind:
    """A beamformer variant and its parameters.

    Parameters
    ----------
    variant : {'das', 'pdas', 'cf', 'cvn', 'cv'}
    p : float
        Root/power exponent of p-DAS.
    epsilon : float
        Variance floor of CV/CV_N, relative to the channel energy.
    cf_normalized : bool
        Divide the CF by the number of valid channels so it lies in [0, 1].
    axial_step : float
        Fine depth step of p-DAS (m).
    bandwidth : float
        Fractional -6 dB width of the Gaussian p-DAS depth band-pass.
    margin : float
        Extra depth (m) reconstructed above and below the grid for p-DAS so the
        filter edge transients fall outside the output.
    """

    variant: str = "das"
    p: float = 4.0
    epsilon: float = 1e-10
    cf_normalized: bool = True
    axial_step: float = 1e-5
    bandwidth: float = 0.8
    margin: float = 0.25e-3

    def __post_init__(self):
        v = str(self.variant).lower()
        if v not in VARIANTS:
            raise ValueError(f"unknown beamformer {self.variant!r}; valid: {', '.join(VARIANTS)}")
        object.__setattr__(self, "variant", v)
        if not self.p >= 1:
            raise ValueError("p must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0 < self.bandwidth < 2:
            raise ValueError("bandwidth must lie in (0, 2)")
        if self.axial_step <= 0 or self.margin < 0:
            raise ValueError("axial_step must be > 0 and margin >= 0")

    @classmethod
    def parse(cls, spec) -> "BeamformerKind":
        if isinstance(spec, cls):
            return spec
        return cls(str(spec))

    @property
    def label(self) -> str:
        return {"das": "DAS", "pdas": "p-DAS", "cf": "CF", "cvn": "CV_N", "cv": "CV"}[self.variant]


@dataclass(frozen=True)
class BeamformedVolume:
    """Non-negative envelope intensities on ``grid``, shape ``grid.dims``."""

    grid: VoxelGrid
    values: np.ndarray = field(repr=False)
    kind: BeamformerKind
    normalization: Optional[float] = None
    elapsed: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.dims:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.dims}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("volume values must be finite and non-negative")
        object.__setattr__(self, "values", v)

    def normalized(self, scale: float) -> "BeamformedVolume":
        return replace(self, values=self.values / scale, normalization=float(scale))


# ---------------------------------------------------------------- per-voxel rules


def das(s: DelayedSampleVector, a: ApodizationVector) -> complex:
    """Apodized coherent sum over valid channels."""
    if len(s.s) != len(a.a):
        raise ValueError("sample and apodization vectors differ in length")
    return complex(np.sum(np.where(s.valid_mask, a.a * s.s, 0)))


def pdas_accumulate(rf_line, p: float) -> np.ndarray:
    """Sum of sign(s)|s|^(1/p) over channels.

    Parameters
    ----------
    rf_line : array_like, shape (n_depth, n_channels) or (n_channels,)
        Real delayed RF samples.
    """
    x = np.asarray(rf_line)
    if np.iscomplexobj(x):
        raise TypeError("p-DAS needs real RF samples, not analytic ones")
    if p < 1:
        raise ValueError("p must be >= 1")
    x2 = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
    out = _kernels.root_compress_sum(x2, float(p))
    return out if x.ndim > 1 else out[0]


def _pdas_band(p: float, f0: float, axial_step: float, c: float, bandwidth: float):
    """Return ``(fc, sigma_f)`` of the Gaussian depth pass band (cycles per metre)."""
    if p > 1 and axial_step > PDAS_MAX_AXIAL_STEP * (1 + 1e-9):
        raise ValueError(
            f"invalid configuration: p-DAS with p > 1 needs an axial step <= "
            f"{PDAS_MAX_AXIAL_STEP * 1e3:g} mm, got {axial_step * 1e3:g} mm"
        )
    fc = 2 * f0 / c  # depth-domain centre frequency
    sigma = bandwidth * fc / (2 * np.sqrt(2 * np.log(2)))  # -6 dB full width = bandwidth * fc
    if fc + 4 * sigma >= 0.5 / axial_step:
        raise ValueError("axial step too coarse for the p-DAS pass band")
    return fc, sigma


def pdas_recover(
    yhat,
    p: float,
    f0: float,
    axial_step: float,
    c: float = 1540.0,
    decimate: int = 1,
    bandwidth: float = 0.8,
    trim: int = 0,
) -> np.ndarray:
    """Re-expand, band-pass and envelope-detect compressed p-DAS depth lines.

    Works along the last axis. The pass band is a zero-phase Gaussian around
    the depth fundamental ``2 f0 / c`` whose -6 dB full width is ``bandwidth``
    times the centre frequency; only positive frequencies are kept, so the
    inverse transform is the analytic signal of the filtered line. ``trim``
    fine samples are dropped from each end; the rest is averaged in groups of
    ``decimate``.
    """
    y = np.asarray(yhat, dtype=float)
    fc, sigma = _pdas_band(p, f0, axial_step, c, bandwidth)
    y = np.sign(y) * np.abs(y) ** p
    n = y.shape[-1]
    pad = int(np.ceil(8 / (2 * np.pi * sigma * axial_step)))
    nfft = next_fast_len(n + 2 * pad)
    f = np.fft.fftfreq(nfft, axial_step)
    gain = np.where(f > 0, 2 * np.exp(-0.5 * ((f - fc) / sigma) ** 2), 0.0)
    spec = np.fft.fft(y, nfft, axis=-1) * gain
    env = np.abs(np.fft.ifft(spec, axis=-1)[..., :n])
    if trim:
        env = env[..., trim : n - trim]
    if decimate > 1:
        m = env.shape[-1] // decimate
        env = env[..., : m * decimate].reshape(*env.shape[:-1], m, decimate).mean(axis=-1)
    return env


def cf_weight(s: DelayedSampleVector, normalized: bool = True) -> float:
    """Coherent-to-incoherent energy ratio of the valid channels."""
    v = s.s[s.valid_mask]
    inc = float(np.sum(v.real**2 + v.imag**2))
    if inc == 0.0:
        return 0.0
    coh = abs(np.sum(v)) ** 2
    return float(coh / (len(v) * inc if normalized else inc))


def cv_weight(
    s: DelayedSampleVector,
    a: ApodizationVector,
    inverse_apodize: bool = True,
    epsilon: float = 1e-10,
) -> float:
    """Coherent energy over the channel variance (CV, or CV_N without 1/a)."""
    mask = s.valid_mask & a.mask
    if mask.sum() < 2:
        return 0.0
    v = s.s[mask]
    u = v / a.a[mask] if inverse_apodize else v
    d = u - u.mean()
    var = float(np.sum(d.real**2 + d.imag**2))
    floor = epsilon * float(np.sum(u.real**2 + u.imag**2))
    den = max(var, floor)
    if den == 0.0:
        return 0.0
    return float(abs(np.sum(v)) ** 2 / den)


# ---------------------------------------------------------------- volume driver


def _kernel_geometry(aframes: Sequence[AnalyticFrame], geom: ArrayGeometry, acq: AcquisitionConfig):
    acq.validate_for(geom)
    first = aframes[0]
    fs = first.sampling_frequency
    f0 = geom.center_frequency
    c = acq.speed_of_sound
    dphi = 2 * np.pi * f0 / fs
    if dphi > np.pi / 2 + 1e-12:
        raise ValueError("sampling frequency must be at least 4x the centre frequency")
    for a in aframes:
        if a.data.shape != first.data.shape or a.t0 != first.t0 or a.sampling_frequency != fs:
            raise ValueError("frames of a batch must share shape, t0 and sampling frequency")
    if first.data.shape[0] != geom.n_elements:
        raise ValueError("channel count does not match the array geometry")
    pos = geom.element_positions
    return (
        np.ascontiguousarray(np.stack([a.data for a in aframes]), dtype=np.complex128),
        float(first.t0),
        float(fs),
        complex(np.exp(-1j * dphi)),
        float(dphi),
        1.0 / c,
        pulse_offset(geom, acq),
        np.ascontiguousarray(pos[:, 0]),
        np.ascontiguousarray(pos[:, 1]),
        geom.element_width * f0 / c,
        geom.element_height * f0 / c,
        SENSITIVITY_CUTOFF,
    )


def _chunks(n: int, size: int = CHUNK_COLUMNS):
    return [(q, min(q + size, n)) for q in range(0, n, size)]


def _map_chunks(fn, n_columns: int, workers: int):
    chunks = _chunks(n_columns)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda qq: fn(*qq), chunks))
    else:
        for q0, q1 in chunks:
            fn(q0, q1)


def _to_volume(cols: np.ndarray, grid: VoxelGrid) -> np.ndarray:
    # (ny * nx, nz) with x fastest -> (nx, ny, nz)
    nx, ny, nz = grid.dims
    return np.ascontiguousarray(cols.reshape(ny, nx, nz).transpose(1, 0, 2))


def _coherence_pass(args, grid: VoxelGrid, flags: int, workers: int):
    xs, ys, zs = grid.axes()
    if zs[0] <= 0:
        raise ValueError("grid must lie in front of the array (z > 0)")
    nf = args[0].shape[0]
    nq, nz = len(xs) * len(ys), len(zs)
    das_o = np.zeros((nf, nq, nz), complex)
    raw = np.zeros((nf, nq, nz), complex) if flags else np.zeros((1, 1, 1), complex)
    inc = np.zeros((nf, nq, nz)) if flags else np.zeros((1, 1, 1))
    nval = np.zeros((nq, nz), np.int64) if flags else np.zeros((1, 1), np.int64)
    want_var = flags & (_kernels.FLAG_VAR | _kernels.FLAG_VAR_N)
    var = np.zeros((2, nf, nq, nz)) if want_var else np.zeros((2, 1, 1, 1))
    usq = np.zeros((2, nf, nq, nz)) if want_var else np.zeros((2, 1, 1, 1))

    def run(q0, q1):
        _kernels.coherence_columns(*args, xs, ys, zs, q0, q1, flags, das_o, raw, inc, nval, var, usq)

    _map_chunks(run, nq, workers)
    return dict(das=das_o, raw=raw, inc=inc, nval=nval, var=var, usq=usq)


def _weights_from_stats(st, variant: str, kind: BeamformerKind) -> np.ndarray:
    env = np.abs(st["das"])
    if variant == "das":
        return env
    coh = st["raw"].real ** 2 + st["raw"].imag ** 2
    if variant == "cf":
        den = st["inc"] * st["nval"] if kind.cf_normalized else st["inc"]
        w = np.divide(coh, den, out=np.zeros_like(coh), where=den > 0)
        return w * env
    which = 1 if variant == "cv" else 0
    den = np.maximum(st["var"][which], kind.epsilon * st["usq"][which])
    w = np.divide(coh, den, out=np.zeros_like(coh), where=(den > 0) & (st["nval"] >= 2))
    return w * env


_FLAGS = {
    "das": 0,
    "cf": _kernels.FLAG_COHERENCE,
    "cvn": _kernels.FLAG_COHERENCE | _kernels.FLAG_VAR_N,
    "cv": _kernels.FLAG_COHERENCE | _kernels.FLAG_VAR,
}


def _pdas_fine_axis(grid: VoxelGrid, kind: BeamformerKind):
    """Fine depth axis, decimation factor and trim (samples per side)."""
    dz = grid.spacing[2]
    factor = max(1, int(np.ceil(dz / kind.axial_step - 1e-9)))
    step = dz / factor
    if kind.p > 1 and step > PDAS_MAX_AXIAL_STEP * (1 + 1e-9):
        raise ValueError("invalid configuration: p-DAS axial step above 0.01 mm")
    trim = int(np.ceil(kind.margin / step))
    z_first = grid.origin[2] - (factor - 1) / 2 * step - trim * step
    n = grid.dims[2] * factor + 2 * trim
    return z_first + step * np.arange(n), factor, trim, step


def _pdas_pass(args, grid: VoxelGrid, kind: BeamformerKind, geom, acq, workers: int):
    xs, ys, _ = grid.axes()
    zf, factor, trim, step = _pdas_fine_axis(grid, kind)
    if zf[0] <= 0:
        raise ValueError("grid (plus p-DAS margin) must lie in front of the array")
    nq = len(xs) * len(ys)
    acc = np.zeros((args[0].shape[0], nq, len(zf)))

    def run(q0, q1):
        _kernels.pdas_columns(*args, xs, ys, zf, q0, q1, float(kind.p), acc)

    _map_chunks(run, nq, workers)
    return pdas_recover(
        acc, kind.p, geom.center_frequency, step, acq.speed_of_sound,
        decimate=factor, bandwidth=kind.bandwidth, trim=trim,
    )


def _available_memory() -> int:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return 2**40


def _check_capacity(n_frames, grid: VoxelGrid, kinds, memory_limit, batch: int = 1):
    nq = grid.dims[0] * grid.dims[1]
    n_vox = grid.n_voxels
    scratch = batch * n_vox * (16 * 2 + 8 * 5)
    for k in kinds:
        if k.variant == "pdas":
            zf, _, _, _ = _pdas_fine_axis(grid, k)
            scratch = max(scratch, batch * nq * len(zf) * 8 * 4)
    required = n_frames * n_vox * 8 * len(kinds) + scratch
    available = _available_memory() if memory_limit is None else int(memory_limit)
    if required > available:
        raise CapacityError(required, available)


def beamform_batch(
    frames: Sequence[ChannelFrame | AnalyticFrame],
    grid: VoxelGrid,
    kinds: Iterable[BeamformerKind | str],
    geom: ArrayGeometry,
    acq: AcquisitionConfig,
    workers: int = 1,
) -> dict[str, list[np.ndarray]]:
    """Envelope volumes of several frames for several beamformers.

    Delays and apodization are evaluated once for the whole batch, and DAS,
    CF, CV_N and CV share one kernel pass computing only the statistics the
    requested variants need. Each frame's result is identical to beamforming
    it alone.
    """
    kinds = [BeamformerKind.parse(k) for k in kinds]
    if not frames:
        return {k.variant: [] for k in kinds}
    aframes = [f if isinstance(f, AnalyticFrame) else analytic_signal(f) for f in frames]
    args = _kernel_geometry(aframes, geom, acq)
    out = {}
    coherent = [k for k in kinds if k.variant != "pdas"]
    if coherent:
        flags = 0
        for k in coherent:
            flags |= _FLAGS[k.variant]
        st = _coherence_pass(args, grid, flags, workers)
        for k in coherent:
            w = _weights_from_stats(st, k.variant, k)
            out[k.variant] = [_to_volume(v, grid) for v in w]
    for k in kinds:
        if k.variant == "pdas":
            env = _pdas_pass(args, grid, k, geom, acq, workers)
            out["pdas"] = [_to_volume(v, grid) for v in env]
    return out


def beamform_frame(
    frame: ChannelFrame | AnalyticFrame,
    grid: VoxelGrid,
    kinds: Iterable[BeamformerKind | str],
    geom: ArrayGeometry,
    acq: AcquisitionConfig,
    workers: int = 1,
) -> dict[str, np.ndarray]:
    """Envelope volumes of one frame for several beamformers."""
    return {k: v[0] for k, v in beamform_batch([frame], grid, kinds, geom, acq, workers).items()}


def beamform_volumes(
    seq: ChannelSequence,
    grid: VoxelGrid,
    kinds: Sequence[BeamformerKind | str],
    geom: ArrayGeometry,
    acq: AcquisitionConfig,
    workers: int = 1,
    normalize: bool = False,
    memory_limit: Optional[int] = None,
    frames: Optional[Sequence[int]] = None,
    batch: int = BATCH_FRAMES,
) -> dict[str, list[BeamformedVolume]]:
    """Beamform every frame with each kind; see :func:`beamform_volume`.

    Frames are processed ``batch`` at a time; ``elapsed`` on each volume is
    the wall time of its batch divided by the batch size (all requested kinds
    together when several are fused into one pass).
    """
    kinds = [BeamformerKind.parse(k) for k in kinds]
    if len({k.variant for k in kinds}) != len(kinds):
        raise ValueError("each variant may appear only once")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    idx = list(range(len(seq))) if frames is None else list(frames)
    _check_capacity(len(idx), grid, kinds, memory_limit, min(batch, max(len(idx), 1)))
    result = {k.variant: [] for k in kinds}
    for b in range(0, len(idx), batch):
        ids = idx[b : b + batch]
        t = time.perf_counter()
        vols = beamform_batch([seq.frame(f) for f in ids], grid, kinds, geom, acq, workers)
        dt = (time.perf_counter() - t) / len(ids)
        logger.debug("frames %d..%d beamformed, %.1f ms per frame", ids[0], ids[-1], dt * 1e3)
        for k in kinds:
            result[k.variant] += [BeamformedVolume(grid, v, k, None, dt) for v in vols[k.variant]]
    if normalize:
        for k in kinds:
            vols = result[k.variant]
            peak = max((float(v.values.max()) for v in vols), default=0.0)
            if peak > 0:
                result[k.variant] = [v.normalized(peak) for v in vols]
    return result


def beamform_volume(
    seq: ChannelSequence,
    grid: VoxelGrid,
    kind: BeamformerKind | str,
    geom: ArrayGeometry,
    acq: AcquisitionConfig,
    workers: int = 1,
    normalize: bool = False,
    memory_limit: Optional[int] = None,
) -> list[BeamformedVolume]:
    """One envelope volume per frame.

    Parameters
    ----------
    seq : ChannelSequence
    grid : VoxelGrid
    kind : BeamformerKind or str
    geom, acq
        Probe and acquisition the data were recorded with.
    workers : int
        Threads used for the column blocks; results do not depend on it.
    normalize : bool
        Divide every frame by the maximum over the whole sequence.
    memory_limit : int, optional
        Byte budget; defaults to the currently available physical memory.

    Raises
    ------
    CapacityError
        If the output and scratch buffers would exceed the budget.
    """
    kind = BeamformerKind.parse(kind)
    return beamform_volumes(seq, grid, [kind], geom, acq, workers, normalize, memory_limit)[kind.variant]


# ---------------------------------------------------------------- serial reference


def beamform_frame_reference(
    frame: ChannelFrame, grid: VoxelGrid, kind: BeamformerKind | str, geom: ArrayGeometry, acq: AcquisitionConfig
) -> np.ndarray:
    """Straightforward voxel-by-voxel evaluation used as a test oracle."""
    kind = BeamformerKind.parse(kind)
    aframe = analytic_signal(frame)
    xs, ys, zs = grid.axes()
    out = np.zeros(grid.dims)
    if kind.variant == "pdas":
        zf, factor, trim, step = _pdas_fine_axis(grid, kind)
        for i, x in enumerate(xs):
            for j, y in enumerate(ys):
                line = np.empty(len(zf))
                for k, z in enumerate(zf):
                    v = (x, y, z)
                    s = gather_delayed_samples(aframe, v, geom, acq, receive_apodization(v, geom, acq))
                    line[k] = pdas_accumulate(s.s.real[s.valid_mask], kind.p) if s.valid_mask.any() else 0.0
                out[i, j] = pdas_recover(
                    line, kind.p, geom.center_frequency, step, acq.speed_of_sound,
                    decimate=factor, bandwidth=kind.bandwidth, trim=trim,
                )
        return out
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            for k, z in enumerate(zs):
                v = (x, y, z)
                a = receive_apodization(v, geom, acq)
                s = gather_delayed_samples(aframe, v, geom, acq, a)
                env = abs(das(s, a))
                if kind.variant == "cf":
                    env *= cf_weight(s, kind.cf_normalized)
                elif kind.variant in ("cv", "cvn"):
                    env *= cv_weight(s, a, kind.variant == "cv", kind.epsilon)
                out[i, j, k] = env
    return out


def coherence_maps(
    frame: ChannelFrame, grid: VoxelGrid, geom: ArrayGeometry, acq: AcquisitionConfig, workers: int = 1
) -> dict[str, np.ndarray]:
    """Weight and denominator maps for inspecting CF against CV.

    Returns the CF, CV_N and CV weights, the CF denominator (incoherent energy)
    and the CV_N/CV denominators (channel variances), each shaped like the grid.
    """
    args = _kernel_geometry([analytic_signal(frame)], geom, acq)
    flags = _FLAGS["cv"] | _FLAGS["cvn"]
    st = _coherence_pass(args, grid, flags, workers)
    st = dict(
        das=st["das"][0], raw=st["raw"][0], inc=st["inc"][0], nval=st["nval"],
        var=st["var"][:, 0], usq=st["usq"][:, 0],
    )
    env = np.abs(st["das"])
    safe = np.where(env > 0, env, 1.0)
    maps = {
        "das": env,
        "cf_weight": _weights_from_stats(st, "cf", BeamformerKind("cf")) / safe,
        "cvn_weight": _weights_from_stats(st, "cvn", BeamformerKind("cvn")) / safe,
        "cv_weight": _weights_from_stats(st, "cv", BeamformerKind("cv")) / safe,
        "incoherent_energy": st["inc"],
        "variance_n": st["var"][0],
        "variance": st["var"][1],
    }
    return {k: _to_volume(v, grid) for k, v in maps.items()}
