"""Probe geometry, acquisition parameters, scenes and voxel grids.

Every type here is frozen after construction; numpy fields are made
read-only so the objects can be shared between worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.signal.windows import tukey

__all__ = [
    "ArrayGeometry",
    "AcquisitionConfig",
    "Scatterer",
    "Scene",
    "VoxelGrid",
    "build_matrix_array",
    "paper_probe",
    "paper_scene_five_scatterers",
    "tukey_apodization",
]


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ArrayGeometry:
    """A 2D matrix array lying on the z=0 plane, centred at the origin.

    Element ``n`` sits at row ``n // cols`` and column ``n % cols`` (row-major);
    columns run along x (lateral), rows along y (elevation).
    """

    rows: int
    cols: int
    pitch_x: float
    pitch_y: float
    element_width: float
    element_height: float
    center_frequency: float
    element_positions: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "element_positions", _frozen(self.element_positions))
        if self.element_positions.shape != (self.rows * self.cols, 3):
            raise ValueError("element_positions must have shape (rows*cols, 3)")

    @property
    def n_elements(self) -> int:
        return self.rows * self.cols

    @property
    def aperture(self) -> tuple[float, float]:
        """Aperture extents (lateral, elevation) in metres."""
        return self.cols * self.pitch_x, self.rows * self.pitch_y

    def element_index(self, row: int, col: int) -> int:
        return row * self.cols + col


def build_matrix_array(
    rows: int,
    cols: int,
    pitch_x: float,
    pitch_y: float,
    f0: float,
    element_width: Optional[float] = None,
    element_height: Optional[float] = None,
) -> ArrayGeometry:
    """Build a uniform-pitch matrix array.

    Element widths default to the pitch (zero kerf).
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"rows and cols must be >= 1, got {rows}x{cols}")
    if pitch_x <= 0 or pitch_y <= 0:
        raise ValueError("pitch must be positive")
    if f0 <= 0:
        raise ValueError("center frequency must be positive")
    element_width = pitch_x if element_width is None else element_width
    element_height = pitch_y if element_height is None else element_height
    if element_width <= 0 or element_height <= 0:
        raise ValueError("element size must be positive")

    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    x = (c - (cols - 1) / 2) * pitch_x
    y = (r - (rows - 1) / 2) * pitch_y
    pos = np.stack([x.ravel(), y.ravel(), np.zeros(rows * cols)], axis=1)
    return ArrayGeometry(
        rows=rows,
        cols=cols,
        pitch_x=float(pitch_x),
        pitch_y=float(pitch_y),
        element_width=float(element_width),
        element_height=float(element_height),
        center_frequency=float(f0),
        element_positions=pos,
    )


def paper_probe() -> ArrayGeometry:
    """32x32 probe with a 9.3 mm x 10.2 mm aperture at 7.8 MHz."""
    return build_matrix_array(32, 32, 9.3e-3 / 32, 10.2e-3 / 32, 7.8e6)


def tukey_apodization(geom: ArrayGeometry, alpha: float = 0.5) -> np.ndarray:
    """Separable 2D Tukey taper over the elements, shape (rows, cols)."""
    return np.outer(tukey(geom.rows, alpha), tukey(geom.cols, alpha))


@dataclass(frozen=True)
class AcquisitionConfig:
    """Acquisition settings for a single 0-degree plane-wave transmission.

    ``depth_range`` sets the receive recording window: it starts at the
    round-trip time of the shallowest depth and ends after the latest echo a
    scatterer at the deepest depth below the aperture can produce.
    """

    speed_of_sound: float = 1540.0
    sampling_frequency: float = 31.2e6
    pulse_cycles: int = 2
    transmit_apodization: Optional[np.ndarray] = field(default=None, repr=False)
    frame_rate: float = 500.0
    depth_range: tuple[float, float] = (10e-3, 30e-3)
    full_transmit_sum: bool = False

    def __post_init__(self):
        if self.speed_of_sound <= 0:
            raise ValueError("speed_of_sound must be positive")
        if self.sampling_frequency <= 0:
            raise ValueError("sampling_frequency must be positive")
        if self.pulse_cycles < 1:
            raise ValueError("pulse_cycles must be >= 1")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        z0, z1 = self.depth_range
        if not 0 < z0 < z1:
            raise ValueError("depth_range must satisfy 0 < start < stop")
        object.__setattr__(self, "depth_range", (float(z0), float(z1)))
        if self.transmit_apodization is not None:
            apod = _frozen(self.transmit_apodization)
            if apod.ndim != 2:
                raise ValueError("transmit_apodization must be a 2D map")
            if np.any(apod < 0) or np.any(apod > 1):
                raise ValueError("transmit apodization weights must lie in [0, 1]")
            object.__setattr__(self, "transmit_apodization", apod)

    @classmethod
    def for_probe(cls, geom: ArrayGeometry, tukey_alpha: float = 0.5, **kwargs):
        """Defaults tied to the probe: fs = 4 f0 and a Tukey transmit taper."""
        kwargs.setdefault("sampling_frequency", 4 * geom.center_frequency)
        kwargs.setdefault("transmit_apodization", tukey_apodization(geom, tukey_alpha))
        return cls(**kwargs)

    def validate_for(self, geom: ArrayGeometry) -> None:
        if self.sampling_frequency < 4 * geom.center_frequency * (1 - 1e-12):
            raise ValueError(
                f"sampling_frequency {self.sampling_frequency:g} Hz is below "
                f"4 x center frequency ({4 * geom.center_frequency:g} Hz)"
            )
        if self.transmit_apodization is not None and self.transmit_apodization.shape != (
            geom.rows,
            geom.cols,
        ):
            raise ValueError("transmit_apodization shape does not match the array")

    def apodization_map(self, geom: ArrayGeometry) -> np.ndarray:
        if self.transmit_apodization is None:
            return np.ones((geom.rows, geom.cols))
        return self.transmit_apodization


@dataclass(frozen=True)
class Scatterer:
    position: tuple[float, float, float]
    coefficient: float

    def __post_init__(self):
        if not self.coefficient > 0:
            raise ValueError("scatterer coefficient must be > 0")
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))


@dataclass(frozen=True)
class Scene:
    """Point scatterers, optionally displaced per frame by ``motion_model``.

    ``motion_model(frame_index)`` returns an (n_scatterers, 3) displacement.
    """

    scatterers: tuple[Scatterer, ...] = ()
    motion_model: Optional[Callable[[int], np.ndarray]] = None

    def __post_init__(self):
        object.__setattr__(self, "scatterers", tuple(self.scatterers))

    def __len__(self):
        return len(self.scatterers)

    @classmethod
    def from_arrays(cls, positions, coefficients) -> "Scene":
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        coefficients = np.broadcast_to(np.asarray(coefficients, dtype=float), len(positions))
        return cls(tuple(Scatterer(tuple(p), float(c)) for p, c in zip(positions, coefficients)))

    def positions(self, frame: int = 0) -> np.ndarray:
        pos = np.array([s.position for s in self.scatterers], dtype=float).reshape(-1, 3)
        if self.motion_model is not None and len(pos):
            pos = pos + np.asarray(self.motion_model(frame), dtype=float).reshape(pos.shape)
        return pos

    def coefficients(self) -> np.ndarray:
        return np.array([s.coefficient for s in self.scatterers], dtype=float)


def paper_scene_five_scatterers() -> Scene:
    """Five on-axis scatterers from 15 to 25 mm, coefficients 1.0 down to 0.2."""
    z = np.linspace(15e-3, 25e-3, 5)
    coef = np.round(np.linspace(1.0, 0.2, 5), 12)
    return Scene.from_arrays(np.column_stack([np.zeros(5), np.zeros(5), z]), coef)


@dataclass(frozen=True)
class VoxelGrid:
    """Regular voxel lattice. Axis 0 is x (lateral), 1 is y (elevation), 2 is z (depth).

    Volumes defined on a grid are arrays of shape ``dims`` indexed ``[i, j, k]``;
    linear indices run x-fastest.
    """

    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]
    dims: tuple[int, int, int]

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        spacing = tuple(float(v) for v in self.spacing)
        dims = tuple(int(v) for v in self.dims)
        if len(origin) != 3 or len(spacing) != 3 or len(dims) != 3:
            raise ValueError("origin, spacing and dims must be 3-vectors")
        if min(spacing) <= 0:
            raise ValueError("voxel spacing must be strictly positive")
        if min(dims) < 1:
            raise ValueError("grid dims must be >= 1")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def centered(
        cls,
        center: Sequence[float],
        extent: Sequence[float],
        spacing: Sequence[float] | float,
    ) -> "VoxelGrid":
        """Grid with a voxel exactly at ``center`` covering at least ``extent``."""
        spacing = np.broadcast_to(np.asarray(spacing, dtype=float), 3)
        half = np.ceil(np.asarray(extent, dtype=float) / (2 * spacing) - 1e-9).astype(int)
        dims = 2 * half + 1
        origin = np.asarray(center, dtype=float) - half * spacing
        return cls(tuple(origin), tuple(spacing), tuple(dims))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(self.origin[a] + self.spacing[a] * np.arange(self.dims[a]) for a in range(3))

    def flatten(self, i, j, k):
        nx, ny, _ = self.dims
        return i + nx * (j + ny * k)

    def unflatten(self, idx):
        nx, ny, _ = self.dims
        return idx % nx, (idx // nx) % ny, idx // (nx * ny)

    def position(self, i, j, k) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.spacing) * np.array([i, j, k], dtype=float)

    def nearest_index(self, point) -> tuple[int, int, int]:
        f = (np.asarray(point, dtype=float) - self.origin) / self.spacing
        return tuple(int(v) for v in np.rint(f))

    def contains(self, points) -> np.ndarray:
        f = (np.atleast_2d(points) - np.asarray(self.origin)) / np.asarray(self.spacing)
        return np.all((f > -0.5) & (f < np.asarray(self.dims) - 0.5), axis=1)

    def refined(self, factor: int) -> "VoxelGrid":
        """Grid covering the same volume with spacing divided by ``factor``."""
        spacing = np.asarray(self.spacing) / factor
        origin = np.asarray(self.origin) - 0.5 * np.asarray(self.spacing) + 0.5 * spacing
        return VoxelGrid(tuple(origin), tuple(spacing), tuple(np.asarray(self.dims) * factor))
