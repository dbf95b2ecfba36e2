"""PSF quality metrics and diagnostic exports.

All decibel values use 20 log10 on envelope amplitudes. Main-lobe regions are
ellipsoids around the true scatterer positions whose semi-axes equal a FWHM
per axis; side lobes are searched in a depth slab around each scatterer with
every main-lobe region excluded.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.signal import find_peaks

from .beamformers import BeamformedVolume
from .core import VoxelGrid
from .delayline import DelayedSampleVector

__all__ = [
    "AXES",
    "WidthUnboundedError",
    "PsfMetrics",
    "fwhm",
    "main_lobe_mask",
    "main_lobe_semi_axes",
    "side_lobe_mask",
    "spsmr",
    "cpsmr_and_max",
    "image_snr",
    "noise_region_between",
    "evaluate_psf",
    "mip",
    "profile",
    "channel_histogram",
    "phase_occupancy",
    "two_peak_valley",
    "to_db_image",
    "write_pgm",
    "format_report",
    "report_csv",
]

AXES = {"lateral": 0, "elevation": 1, "axial": 2, "x": 0, "y": 1, "z": 2}
SNR_CAP_DB = 400.0


class WidthUnboundedError(ValueError):
    """The profile never drops below half maximum inside the grid."""


def _axis(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXES[axis.lower()]
        except KeyError:
            raise ValueError(f"unknown axis {axis!r}") from None
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    return int(axis)


def _values(volume) -> np.ndarray:
    return volume.values if isinstance(volume, BeamformedVolume) else np.asarray(volume, dtype=float)


def _grid(volume, grid: Optional[VoxelGrid]) -> VoxelGrid:
    if grid is not None:
        return grid
    if isinstance(volume, BeamformedVolume):
        return volume.grid
    raise ValueError("a VoxelGrid is needed for a plain array")


def _half_crossing(prof: np.ndarray, peak: int, half: float, step: int) -> float:
    i = peak
    while 0 <= i + step < len(prof):
        nxt = i + step
        if prof[nxt] < half:
            # linear interpolation between i (>= half) and nxt (< half)
            frac = (prof[i] - half) / (prof[i] - prof[nxt])
            return i + step * frac
        i = nxt
    raise WidthUnboundedError("profile does not fall below half maximum inside the grid")


def fwhm(volume, peak_voxel, axis="lateral", grid: Optional[VoxelGrid] = None) -> float:
    """Full width at half maximum (mm) of the profile through ``peak_voxel``.

    Half-maximum crossings are located by linear interpolation between voxels.
    """
    v = _values(volume)
    g = _grid(volume, grid)
    ax = _axis(axis)
    idx = list(peak_voxel)
    idx[ax] = slice(None)
    prof = v[tuple(idx)]
    peak = int(peak_voxel[ax])
    half = prof[peak] / 2
    if not half > 0:
        raise WidthUnboundedError("peak value is not positive")
    left = _half_crossing(prof, peak, half, -1)
    right = _half_crossing(prof, peak, half, +1)
    return (right - left) * g.spacing[ax] * 1e3


def _offsets(grid: VoxelGrid, center) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs, ys, zs = grid.axes()
    return (
        (xs - center[0])[:, None, None],
        (ys - center[1])[None, :, None],
        (zs - center[2])[None, None, :],
    )


def main_lobe_mask(grid: VoxelGrid, center, semi_axes) -> np.ndarray:
    """Voxels inside the ellipsoid with the given semi-axes (m) around ``center``."""
    dx, dy, dz = _offsets(grid, center)
    a = np.asarray(semi_axes, dtype=float)
    return (dx / a[0]) ** 2 + (dy / a[1]) ** 2 + (dz / a[2]) ** 2 <= 1.0


def side_lobe_mask(grid: VoxelGrid, centers, index: int, semi_axes, slab: float = 1e-3) -> np.ndarray:
    """Depth slab around scatterer ``index`` minus every main-lobe ellipsoid.

    ``semi_axes`` is one (3,) triple shared by all scatterers or one per scatterer.
    """
    centers = np.atleast_2d(centers)
    semi = np.broadcast_to(np.asarray(semi_axes, dtype=float), centers.shape)
    _, _, dz = _offsets(grid, centers[index])
    mask = np.broadcast_to(np.abs(dz) <= slab, grid.dims).copy()
    for c, a in zip(centers, semi):
        mask &= ~main_lobe_mask(grid, c, a)
    return mask


def _peak(v: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        raise ValueError("invalid region: mask selects no voxels")
    return float(v[mask].max())


def _db(ratio):
    with np.errstate(divide="ignore"):
        return 20 * np.log10(ratio)


def spsmr(volume, centers, index: int, semi_axes, slab: float = 1e-3, grid: Optional[VoxelGrid] = None) -> float:
    """Side-to-main peak ratio (dB) of scatterer ``index`` against its own main lobe."""
    v = _values(volume)
    g = _grid(volume, grid)
    centers = np.atleast_2d(centers)
    semi = np.broadcast_to(np.asarray(semi_axes, dtype=float), centers.shape)
    main = _peak(v, main_lobe_mask(g, centers[index], semi[index]))
    side = _peak(v, side_lobe_mask(g, centers, index, semi, slab))
    return float(_db(side / main)) if main > 0 else float("nan")


def cpsmr_and_max(volume, centers, semi_axes, slab: float = 1e-3, grid: Optional[VoxelGrid] = None):
    """Cross side-to-main ratios.

    Returns
    -------
    cpsmr : ndarray, shape (n, n)
        Entry ``(i, j)`` is 20 log10(side_i / main_j); the diagonal holds SPSMR.
    max_psmr : float
        Largest entry.
    """
    v = _values(volume)
    g = _grid(volume, grid)
    centers = np.atleast_2d(centers)
    if len(centers) < 2:
        raise ValueError("cross ratios need at least two scatterers")
    semi = np.broadcast_to(np.asarray(semi_axes, dtype=float), centers.shape)
    mains = np.array([_peak(v, main_lobe_mask(g, c, a)) for c, a in zip(centers, semi)])
    sides = np.array([_peak(v, side_lobe_mask(g, centers, i, semi, slab)) for i in range(len(centers))])
    with np.errstate(divide="ignore", invalid="ignore"):
        m = _db(sides[:, None] / mains[None, :])
    return m, float(np.nanmax(m))


def noise_region_between(grid: VoxelGrid, centers, half_thickness: float = 0.25e-3) -> np.ndarray:
    """Depth slabs midway between consecutive scatterers (sorted by depth)."""
    z = np.sort(np.atleast_2d(centers)[:, 2])
    mids = (z[1:] + z[:-1]) / 2
    zs = grid.axes()[2]
    sel = np.zeros(len(zs), bool)
    for m in mids:
        sel |= np.abs(zs - m) <= half_thickness
    return np.broadcast_to(sel[None, None, :], grid.dims).copy()


def image_snr(volume, signal_voxels, noise_region: np.ndarray) -> tuple[float, bool]:
    """20 log10(mean PSF-centre intensity / RMS of the noise region).

    Returns
    -------
    snr_db : float
    capped : bool
        True when the noise RMS is zero and ``snr_db`` is the cap value.
    """
    v = _values(volume)
    noise_region = np.asarray(noise_region, bool)
    sig = np.array([v[tuple(ix)] for ix in signal_voxels])
    if np.any(noise_region & _point_mask(v.shape, signal_voxels)):
        raise ValueError("signal and noise regions overlap")
    rms = float(np.sqrt(np.mean(v[noise_region] ** 2))) if noise_region.any() else 0.0
    mean_sig = float(sig.mean())
    if rms == 0.0:
        return SNR_CAP_DB, True
    if mean_sig == 0.0:
        return -SNR_CAP_DB, True
    return float(min(_db(mean_sig / rms), SNR_CAP_DB)), False


def _point_mask(shape, voxels) -> np.ndarray:
    m = np.zeros(shape, bool)
    for ix in voxels:
        m[tuple(ix)] = True
    return m


@dataclass
class PsfMetrics:
    """PSF measurements of one reconstructed scene (lengths in mm, ratios in dB)."""

    label: str
    lateral_fwhm: np.ndarray
    elevational_fwhm: np.ndarray
    spsmr: np.ndarray
    cpsmr: np.ndarray = field(repr=False)
    max_psmr: float
    snr: float
    snr_capped: bool = False
    processing_time: float = 0.0
    peaks: np.ndarray = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "spsmr": (float(np.mean(self.spsmr)), float(np.std(self.spsmr))),
            "max_psmr": self.max_psmr,
            "lateral_fwhm": (float(np.mean(self.lateral_fwhm)), float(np.std(self.lateral_fwhm))),
            "elevational_fwhm": (float(np.mean(self.elevational_fwhm)), float(np.std(self.elevational_fwhm))),
            "snr": self.snr,
            "processing_time": self.processing_time,
        }


def main_lobe_semi_axes(volume, centers, grid: Optional[VoxelGrid] = None, search=None) -> np.ndarray:
    """Per-scatterer (lateral, elevation, axial) FWHM in metres, peaks searched near truth."""
    v = _values(volume)
    g = _grid(volume, grid)
    out = []
    for c in np.atleast_2d(centers):
        pk = _local_peak(v, g, c, search)
        out.append([fwhm(v, pk, a, g) * 1e-3 for a in range(3)])
    return np.array(out)


def _local_peak(v: np.ndarray, g: VoxelGrid, center, search=None) -> tuple[int, int, int]:
    # argmax inside a small box around the true position (2 voxels laterally, 4 axially)
    half = np.array([2, 2, 4]) if search is None else np.asarray(search)
    c = np.array(g.nearest_index(center))
    lo = np.maximum(c - half, 0)
    hi = np.minimum(c + half + 1, g.dims)
    sub = v[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    return tuple(int(x) for x in lo + np.unravel_index(np.argmax(sub), sub.shape))


def evaluate_psf(
    volume: BeamformedVolume,
    centers,
    semi_axes=None,
    noise_region: Optional[np.ndarray] = None,
    slab: float = 1e-3,
) -> PsfMetrics:
    """All PSF metrics of a multi-scatterer volume.

    Parameters
    ----------
    volume : BeamformedVolume
    centers : array_like, shape (n, 3)
        True scatterer positions (m).
    semi_axes : array_like, optional
        Main-lobe ellipsoid semi-axes (m), one triple or one per scatterer.
        Defaults to this volume's own FWHMs. Passing a reference beamformer's
        FWHMs lets several beamformers share the same regions.
    noise_region : ndarray of bool, optional
        Defaults to :func:`noise_region_between`.
    """
    v, g = volume.values, volume.grid
    centers = np.atleast_2d(centers)
    peaks = [_local_peak(v, g, c) for c in centers]
    lat = np.array([fwhm(v, p, "lateral", g) for p in peaks])
    ele = np.array([fwhm(v, p, "elevation", g) for p in peaks])
    if semi_axes is None:
        semi_axes = main_lobe_semi_axes(volume, centers)
    m, mx = cpsmr_and_max(volume, centers, semi_axes, slab)
    if noise_region is None:
        noise_region = noise_region_between(g, centers)
    snr, capped = image_snr(volume, peaks, noise_region)
    return PsfMetrics(
        volume.kind.label, lat, ele, np.diag(m).copy(), m, mx, snr, capped, volume.elapsed, np.array(peaks)
    )


# ---------------------------------------------------------------- images and diagnostics


def mip(volume, axis="axial") -> np.ndarray:
    """Maximum intensity projection along ``axis``."""
    return _values(volume).max(axis=_axis(axis))


def profile(image: np.ndarray, average_axis: int = 0, band: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Mean of a 2D map across ``average_axis`` over the index band ``[start, stop)``."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("profile needs a 2D map")
    if band is not None:
        sl = [slice(None), slice(None)]
        sl[average_axis] = slice(*band)
        img = img[tuple(sl)]
    if img.shape[average_axis] == 0:
        raise ValueError("empty averaging band")
    return img.mean(axis=average_axis)


def channel_histogram(s: DelayedSampleVector, bins=(16, 36), amplitude_range=None):
    """Amplitude x phase histogram of the valid channel samples.

    Returns
    -------
    hist : ndarray, shape (amplitude_bins, phase_bins)
    amp_edges, phase_edges : ndarray
    """
    v = s.s[s.valid_mask]
    amp = np.abs(v)
    if amplitude_range is None:
        amplitude_range = (0.0, float(amp.max()) if amp.size and amp.max() > 0 else 1.0)
    return np.histogram2d(amp, np.angle(v), bins=bins, range=[amplitude_range, [-np.pi, np.pi]])


def phase_occupancy(hist: np.ndarray, mass: float = 0.9) -> float:
    """Smallest fraction of phase bins holding ``mass`` of the histogram counts."""
    per_phase = np.sort(np.asarray(hist).sum(axis=0))[::-1]
    total = per_phase.sum()
    if total == 0:
        return 0.0
    k = int(np.searchsorted(np.cumsum(per_phase), mass * total - 1e-12)) + 1
    return k / len(per_phase)


def two_peak_valley(series, min_separation: int = 2, min_height: float = 0.5):
    """Depth (dB) of the dip between the two highest peaks of a 1D profile.

    Only local maxima at least ``min_height`` times the profile maximum and
    ``min_separation`` samples apart count as peaks, so noise ripples on the
    flanks are not mistaken for a second structure.

    Returns
    -------
    valley_db : float
        20 log10(min(peak1, peak2) / valley); 0 when fewer than two peaks exist.
    peaks : tuple of int or None
        Indices of the two peaks.
    """
    y = np.asarray(series, dtype=float)
    if y.size < 3 or not np.any(y > 0):
        return 0.0, None
    padded = np.concatenate([[-np.inf], y, [-np.inf]])
    idx, _ = find_peaks(padded, height=min_height * y.max(), distance=min_separation)
    idx = idx - 1
    if len(idx) < 2:
        return 0.0, None
    top = idx[np.argsort(y[idx])[::-1][:2]]
    a, b = sorted(int(i) for i in top)
    valley = float(y[a : b + 1].min())
    lower = min(y[a], y[b])
    if valley <= 0:
        return float("inf"), (a, b)
    return float(_db(lower / valley)), (a, b)


def to_db_image(image: np.ndarray, db_range: float = 40.0) -> np.ndarray:
    """Map an amplitude image to 8-bit grey levels over ``[-db_range, 0]`` dB of its max."""
    img = np.asarray(image, dtype=float)
    if db_range <= 0:
        raise ValueError("db_range must be positive")
    peak = img.max() if img.size else 0.0
    if peak <= 0:
        return np.zeros(img.shape, np.uint8)
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(np.maximum(img, 0) / peak)
    return np.round(np.clip(1 + db / db_range, 0, 1) * 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray, db_range: float = 40.0) -> Path:
    """Write a 2D amplitude map as a binary 8-bit PGM (rows = first axis)."""
    g = to_db_image(image, db_range)
    if g.ndim != 2:
        raise ValueError("PGM export needs a 2D image")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(g).tobytes())
    return path


# ---------------------------------------------------------------- reports

_ROWS = [
    ("SPSMR(dB)", "spsmr", "{:.1f}±{:.2f}"),
    ("Max-PSMR(dB)", "max_psmr", "{:.2f}"),
    ("Lateral FWHM(mm)", "lateral_fwhm", "{:.3f}±{:.3f}"),
    ("Elevation FWHM(mm)", "elevational_fwhm", "{:.3f}±{:.3f}"),
    ("SNR(dB)", "snr", "{:.1f}"),
    ("Processing Time(s)", "processing_time", "{:.2f}"),
]


def format_report(results: Sequence[PsfMetrics], title: str = "") -> str:
    """Plain-text table: one column per beamformer, one row per metric."""
    cols = [r.label for r in results]
    cells = []
    for name, key, fmt in _ROWS:
        row = [name]
        for r in results:
            val = r.summary()[key]
            row.append(fmt.format(*val) if isinstance(val, tuple) else fmt.format(val))
        cells.append(row)
    header = [""] + cols
    widths = [max(len(str(x)) for x in col) for col in zip(header, *cells)]
    lines = [title] if title else []
    lines.append("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def report_csv(results: Sequence[PsfMetrics]) -> str:
    """Per-scatterer CSV with the scene-level values repeated on every row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["beamformer", "scatterer", "lateral_fwhm_mm", "elevational_fwhm_mm", "spsmr_db",
         "max_psmr_db", "snr_db", "processing_time_s"]
    )
    for r in results:
        for i in range(len(r.spsmr)):
            w.writerow(
                [r.label, i, f"{r.lateral_fwhm[i]:.6g}", f"{r.elevational_fwhm[i]:.6g}", f"{r.spsmr[i]:.6g}",
                 f"{r.max_psmr:.6g}", f"{r.snr:.6g}", f"{r.processing_time:.6g}"]
            )
    return buf.getvalue()
