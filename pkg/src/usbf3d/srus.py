"""Super-resolution localization: clutter filter, thresholding, 3D NCC,
regional maxima, spline sub-voxel refinement and density accumulation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import eigh

from . import _kernels
from .beamformers import BeamformedVolume, BeamformerKind, beamform_batch, beamform_frame, beamform_volumes
from .core import AcquisitionConfig, ArrayGeometry, Scene, VoxelGrid
from .simulator import ChannelSequence, add_white_noise, simulate_frame

logger = logging.getLogger(__name__)

__all__ = [
    "PAPER_THRESHOLDS_DB",
    "ClutterFilterConfig",
    "LocalizationEvent",
    "DensityMap",
    "SrusConfig",
    "CalibrationError",
    "svd_clutter_filter",
    "estimate_psf_template",
    "ncc3d",
    "regional_maxima",
    "detect_and_localize",
    "threshold_volume",
    "accumulate_density",
    "localize_sequence",
    "run_srus",
    "calibrate_thresholds",
]

# in vitro thresholds reported for the four beamformers; CV_N shares CV's
PAPER_THRESHOLDS_DB = {"das": -10.0, "pdas": -35.0, "cf": -27.5, "cv": -40.0, "cvn": -40.0}


@dataclass(frozen=True)
class ClutterFilterConfig:
    """Singular components removed by the clutter filter.

    Parameters
    ----------
    low_cutoff : int
        Number of largest components removed.
    high_cutoff : int, optional
        Number of smallest components removed.
    block_samples : int, optional
        Filter blocks of this many time samples independently (each with its
        own SVD). This bounds memory but is an approximation of the full
        filter; ``None`` filters the whole Casorati matrix at once.
    """

    low_cutoff: int = 2
    high_cutoff: Optional[int] = None
    block_samples: Optional[int] = None

    def __post_init__(self):
        if self.low_cutoff < 0:
            raise ValueError("low_cutoff must be >= 0")
        if self.high_cutoff is not None and self.high_cutoff < 0:
            raise ValueError("high_cutoff must be >= 0")
        if self.block_samples is not None and self.block_samples < 1:
            raise ValueError("block_samples must be >= 1")


@dataclass(frozen=True)
class LocalizationEvent:
    frame: int
    position: tuple[float, float, float]
    ncc_peak: float


@dataclass
class DensityMap:
    """Event counts on a super-resolution grid; ``dropped`` counts events outside it."""

    grid: VoxelGrid
    counts: np.ndarray = field(repr=False)
    dropped: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())


# ---------------------------------------------------------------- clutter filter


def _removed_components(gram: np.ndarray, cfg: ClutterFilterConfig) -> np.ndarray:
    # right singular vectors from the eigendecomposition of C^T C, largest first
    w, v = eigh(gram)
    v = v[:, ::-1]
    n = v.shape[1]
    drop = list(range(cfg.low_cutoff))
    if cfg.high_cutoff:
        drop += list(range(n - cfg.high_cutoff, n))
    return v[:, drop]


def _filter_block(block: np.ndarray, cfg: ClutterFilterConfig, rows_per_pass: int) -> np.ndarray:
    # block: (F, R) frames x flattened space, filtered in place in float64 passes
    f, r = block.shape
    gram = np.zeros((f, f))
    for s in range(0, r, rows_per_pass):
        c = np.asarray(block[:, s : s + rows_per_pass], dtype=float)
        gram += c @ c.T
    vr = _removed_components(gram, cfg)
    if vr.shape[1] == 0:
        return block
    for s in range(0, r, rows_per_pass):
        c = np.asarray(block[:, s : s + rows_per_pass], dtype=float)
        block[:, s : s + rows_per_pass] = c - vr @ (vr.T @ c)
    return block


def svd_clutter_filter(seq: ChannelSequence, cfg: ClutterFilterConfig = ClutterFilterConfig()) -> ChannelSequence:
    """Remove the strongest (and optionally weakest) singular components.

    The Casorati matrix has one column per frame and one row per
    (channel, sample) pair. Its right singular vectors are taken from the
    eigendecomposition of the frames x frames Gram matrix, which is
    accumulated in row blocks so the matrix is never duplicated in float64.
    """
    n_frames = len(seq)
    if n_frames < 2:
        raise ValueError("the clutter filter needs at least 2 frames")
    removed = cfg.low_cutoff + (cfg.high_cutoff or 0)
    if removed >= n_frames:
        raise ValueError(
            f"invalid configuration: cutoffs remove {removed} of {n_frames} components"
        )
    data = np.array(seq.data, copy=True)
    if removed == 0:
        return ChannelSequence(data, seq.t0, seq.sampling_frequency, seq.frame_rate)
    f, n_el, n_t = data.shape
    rows_per_pass = max(1, 2**22 // f)
    if cfg.block_samples is None:
        flat = data.reshape(f, n_el * n_t)
        _filter_block(flat, cfg, rows_per_pass)
    else:
        for t in range(0, n_t, cfg.block_samples):
            blk = data[:, :, t : t + cfg.block_samples].reshape(f, -1).copy()
            data[:, :, t : t + cfg.block_samples] = _filter_block(blk, cfg, rows_per_pass).reshape(
                f, n_el, -1
            )
    return ChannelSequence(data, seq.t0, seq.sampling_frequency, seq.frame_rate)


# ---------------------------------------------------------------- templates and NCC


def estimate_psf_template(
    kind: BeamformerKind | str,
    geom: ArrayGeometry,
    acq: AcquisitionConfig,
    grid_spacing=50e-6,
    depth: Optional[float] = None,
    crop_db: float = -20.0,
    max_half=(8, 8, 6),
    min_half=(2, 2, 2),
    snr_db: Optional[float] = None,
    realizations: int = 8,
    seed=0,
) -> np.ndarray:
    """Simulated noise-free PSF cropped to its support box, peak normalized to 1.

    The box is symmetric about the peak voxel and holds every voxel above
    ``crop_db``, between ``min_half`` and ``max_half`` voxels on each side of
    the centre. The lower bound keeps templates of very sharp beamformers
    from collapsing to a single voxel.

    With ``snr_db`` the template is the mean PSF over ``realizations``
    noisy frames. Coherence-weighted beamformers are far sharper on clean
    data than on noisy data, so this matches what the detector will see.
    """
    kind = BeamformerKind.parse(kind)
    if depth is None:
        depth = float(np.mean(acq.depth_range))
    spacing = np.broadcast_to(np.asarray(grid_spacing, dtype=float), 3)
    half = np.asarray(max_half, dtype=int)
    grid = VoxelGrid(tuple(np.array([0.0, 0.0, depth]) - half * spacing), tuple(spacing), tuple(2 * half + 1))
    frame = simulate_frame(Scene.from_arrays([[0.0, 0.0, depth]], 1.0), geom, acq)
    if snr_db is None:
        vol = beamform_frame(frame, grid, [kind], geom, acq)[kind.variant]
    else:
        rngs = np.random.default_rng(seed).spawn(realizations)
        noisy = [add_white_noise(frame, snr_db, r) for r in rngs]
        vol = np.mean(beamform_batch(noisy, grid, [kind], geom, acq)[kind.variant], axis=0)
    vol = vol / vol.max()
    peak = np.array(np.unravel_index(np.argmax(vol), vol.shape))
    above = np.argwhere(vol >= 10 ** (crop_db / 20))
    ext = np.max(np.abs(above - peak), axis=0)
    room = np.minimum(peak, np.array(vol.shape) - 1 - peak)
    ext = np.maximum(ext, np.minimum(np.asarray(min_half, dtype=int), half))
    ext = np.minimum(np.minimum(ext, half), room)
    sl = tuple(slice(p - e, p + e + 1) for p, e in zip(peak, ext))
    return np.ascontiguousarray(vol[sl])


def ncc3d(volume, template: np.ndarray) -> np.ndarray:
    """Zero-normalized cross-correlation map of ``volume`` against ``template``.

    Each voxel holds the correlation coefficient between the template and the
    equally sized patch centred on it. Voxels where the template does not fit
    and constant patches are 0.
    """
    v = volume.values if isinstance(volume, BeamformedVolume) else np.asarray(volume, dtype=float)
    t = np.asarray(template, dtype=float)
    if t.ndim != 3 or any(s % 2 == 0 for s in t.shape):
        raise ValueError("template must be 3D with odd sizes")
    if any(ts > vs for ts, vs in zip(t.shape, v.shape)):
        raise ValueError("template larger than the volume")
    out = np.zeros(v.shape)
    _kernels.zncc_volume(np.ascontiguousarray(v), np.ascontiguousarray(t), out)
    return out


# ---------------------------------------------------------------- detection


def regional_maxima(coef: np.ndarray, min_coef: float = 0.3) -> np.ndarray:
    """Indices (k, 3) of voxels strictly above all 26 neighbours and >= ``min_coef``.

    Neighbours outside the array are ignored.
    """
    c = np.asarray(coef, dtype=float)
    padded = np.pad(c, 1, constant_values=-np.inf)
    is_max = c >= min_coef
    nx, ny, nz = c.shape
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                nb = padded[1 + dx : 1 + dx + nx, 1 + dy : 1 + dy + ny, 1 + dz : 1 + dz + nz]
                is_max &= c > nb
    return np.argwhere(is_max)


def _spline_peak(patch: np.ndarray, upsample: int) -> tuple[np.ndarray, float]:
    """Sub-voxel offset of the maximum of a separable natural cubic spline."""
    h = patch.shape[0] // 2
    x = np.arange(-h, h + 1, dtype=float)
    xf = np.linspace(-h, h, 2 * h * upsample + 1)
    p = patch
    for ax in range(3):
        p = CubicSpline(x, p, axis=ax, bc_type="natural")(xf)
    i = np.unravel_index(np.argmax(p), p.shape)
    return np.array([xf[j] for j in i]), float(p[i])


def detect_and_localize(
    coef_map: np.ndarray,
    grid: VoxelGrid,
    min_coef: float = 0.3,
    window: int = 5,
    upsample: int = 10,
    frame: int = 0,
    margin=None,
) -> list[LocalizationEvent]:
    """Regional maxima of an NCC map refined to sub-voxel positions.

    Each maximum's ``window``-sized patch is interpolated with a separable
    natural cubic spline at ``upsample`` times the voxel density and the
    interpolated maximum is reported in world coordinates. Maxima closer than
    ``margin`` voxels (an int or one per axis, at least ``window // 2``) to
    the border are dropped.
    """
    c = np.asarray(coef_map, dtype=float)
    if not np.all(np.isfinite(c)):
        raise ValueError("coefficient map must be finite")
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    h = window // 2
    margin = np.maximum(np.broadcast_to(np.asarray(h if margin is None else margin, dtype=int), 3), h)
    events = []
    dropped = 0
    for idx in regional_maxima(c, min_coef):
        if np.any(idx < margin) or np.any(idx >= np.asarray(c.shape) - margin):
            dropped += 1
            continue
        patch = c[idx[0] - h : idx[0] + h + 1, idx[1] - h : idx[1] + h + 1, idx[2] - h : idx[2] + h + 1]
        off, _ = _spline_peak(patch, upsample)
        pos = grid.position(*(idx + off))
        events.append(LocalizationEvent(int(frame), tuple(float(v) for v in pos), float(c[tuple(idx)])))
    if dropped:
        logger.debug("frame %d: %d peaks too close to the border dropped", frame, dropped)
    return events


def threshold_volume(volume, threshold_db: float, reference: Optional[float] = None) -> np.ndarray:
    """Zero every voxel below ``reference * 10**(threshold_db / 20)``.

    ``reference`` defaults to the volume maximum; pass 1.0 for volumes already
    normalized to their sequence maximum.
    """
    v = volume.values if isinstance(volume, BeamformedVolume) else np.asarray(volume, dtype=float)
    if threshold_db == -np.inf:
        return v.copy()
    ref = float(v.max()) if reference is None else float(reference)
    return np.where(v >= ref * 10 ** (threshold_db / 20), v, 0.0)


def accumulate_density(events: Sequence[LocalizationEvent], sr_grid: VoxelGrid) -> DensityMap:
    """Per-voxel event counts; events outside ``sr_grid`` are dropped and counted."""
    counts = np.zeros(sr_grid.dims, dtype=np.int64)
    if not events:
        return DensityMap(sr_grid, counts, 0)
    pos = np.array([e.position for e in events])
    inside = sr_grid.contains(pos)
    idx = np.rint((pos[inside] - sr_grid.origin) / sr_grid.spacing).astype(int)
    np.add.at(counts, tuple(idx.T), 1)
    return DensityMap(sr_grid, counts, int((~inside).sum()))


# ---------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class SrusConfig:
    """Settings of the localization pipeline after beamforming."""

    clutter: ClutterFilterConfig = ClutterFilterConfig()
    thresholds_db: Mapping[str, float] = field(default_factory=lambda: dict(PAPER_THRESHOLDS_DB))
    min_coef: float = 0.3
    window: int = 5
    upsample: int = 10
    template_crop_db: float = -20.0
    template_max_half: tuple[int, int, int] = (8, 8, 6)
    template_depth: Optional[float] = None
    template_snr_db: Optional[float] = None
    template_realizations: int = 8

    def template(self, kind, geom: ArrayGeometry, acq: AcquisitionConfig, spacing) -> np.ndarray:
        """PSF template for ``kind`` built with these settings."""
        return estimate_psf_template(
            kind, geom, acq, spacing, self.template_depth, self.template_crop_db, self.template_max_half,
            snr_db=self.template_snr_db, realizations=self.template_realizations,
        )

    def threshold(self, variant: str) -> float:
        try:
            return float(self.thresholds_db[variant])
        except KeyError:
            raise ValueError(f"no threshold configured for {variant!r}") from None


def localize_sequence(
    volumes: Sequence[BeamformedVolume],
    template: np.ndarray,
    threshold_db: float,
    cfg: SrusConfig = SrusConfig(),
    reference: Optional[float] = None,
    workers: int = 1,
    frame_ids: Optional[Sequence[int]] = None,
) -> list[LocalizationEvent]:
    """Threshold, correlate and detect on every volume; events ordered by frame.

    ``reference`` is the intensity the threshold is relative to; it defaults to
    the maximum over all ``volumes`` (the sequence maximum).
    """
    if not volumes:
        return []
    if reference is None:
        reference = max(float(v.values.max()) for v in volumes)
    margin = np.asarray(template.shape) // 2 + cfg.window // 2
    ids = list(range(len(volumes))) if frame_ids is None else list(frame_ids)

    def one(i):
        vol = volumes[i]
        if reference <= 0:
            return []
        th = threshold_volume(vol, threshold_db, reference)
        coef = ncc3d(th, template)
        return detect_and_localize(coef, vol.grid, cfg.min_coef, cfg.window, cfg.upsample, ids[i], margin)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_frame = list(pool.map(one, range(len(volumes))))
    else:
        per_frame = [one(i) for i in range(len(volumes))]
    return [e for ev in per_frame for e in ev]


def run_srus(
    seq: ChannelSequence,
    grid: VoxelGrid,
    kinds: Sequence[BeamformerKind | str],
    geom: ArrayGeometry,
    acq: AcquisitionConfig,
    cfg: SrusConfig = SrusConfig(),
    workers: int = 1,
    templates: Optional[Mapping[str, np.ndarray]] = None,
    sr_factor: int = 10,
    return_volumes: bool = False,
):
    """Clutter filter, beamform, localize and accumulate for each beamformer.

    Returns
    -------
    dict
        ``variant -> (events, DensityMap)``; with ``return_volumes`` the
        normalized volumes are added as a third element.
    """
    kinds = [BeamformerKind.parse(k) for k in kinds]
    if len(seq) >= 2 and (cfg.clutter.low_cutoff or cfg.clutter.high_cutoff):
        seq = svd_clutter_filter(seq, cfg.clutter)
    vols = beamform_volumes(seq, grid, kinds, geom, acq, workers=workers, normalize=True)
    sr_grid = grid.refined(sr_factor)
    out = {}
    for k in kinds:
        tmpl = None if templates is None else templates.get(k.variant)
        if tmpl is None:
            tmpl = cfg.template(k, geom, acq, grid.spacing)
        events = localize_sequence(vols[k.variant], tmpl, cfg.threshold(k.variant), cfg, 1.0, workers)
        res = (events, accumulate_density(events, sr_grid))
        out[k.variant] = res + (vols[k.variant],) if return_volumes else res
    return out


class CalibrationError(RuntimeError):
    """No threshold in the search range reaches the target count."""

    def __init__(self, variant: str, bracket: tuple[int, int], target: int):
        self.variant = variant
        self.bracket = bracket
        self.target = target
        super().__init__(
            f"{variant}: event counts span {bracket[0]}..{bracket[1]} over the threshold "
            f"range, target {target} is not reachable"
        )


def calibrate_thresholds(
    volumes: Mapping[str, Sequence[BeamformedVolume]],
    templates: Mapping[str, np.ndarray],
    target_count: int,
    cfg: SrusConfig = SrusConfig(),
    tolerance: float = 0.1,
    db_range: tuple[float, float] = (-80.0, 0.0),
    max_iter: int = 40,
    workers: int = 1,
) -> dict[str, tuple[float, int]]:
    """Bisect each beamformer's threshold until its event count is within
    ``tolerance`` of ``target_count``.

    Returns ``variant -> (threshold_db, count)``.

    Raises
    ------
    CalibrationError
        When the target lies outside the counts reachable in ``db_range``.
    """
    out = {}
    for variant, vols in volumes.items():
        tmpl = templates[variant]

        def count(th):
            return len(localize_sequence(vols, tmpl, th, cfg, None, workers))

        lo, hi = db_range  # lo keeps more voxels
        c_lo, c_hi = count(lo), count(hi)
        best = min(((lo, c_lo), (hi, c_hi)), key=lambda tc: abs(tc[1] - target_count))
        if abs(best[1] - target_count) > tolerance * target_count:
            if not min(c_lo, c_hi) <= target_count <= max(c_lo, c_hi):
                raise CalibrationError(variant, (min(c_lo, c_hi), max(c_lo, c_hi)), target_count)
            for _ in range(max_iter):
                mid = 0.5 * (lo + hi)
                c = count(mid)
                if abs(c - target_count) < abs(best[1] - target_count):
                    best = (mid, c)
                if abs(c - target_count) <= tolerance * target_count:
                    break
                # counts usually fall as the threshold rises
                if (c < target_count) == (c_lo >= c_hi):
                    hi = mid
                else:
                    lo = mid
            if abs(best[1] - target_count) > tolerance * target_count:
                raise CalibrationError(variant, (min(c_lo, c_hi), max(c_lo, c_hi)), target_count)
        out[variant] = (float(best[0]), int(best[1]))
    return out
