"""File formats: binary arrays with a JSON sidecar, and CSV tables.

A binary file starts with a small little-endian header::

    magic      8 bytes   b"USBF3D\\x00\\x01"
    ndim       uint32
    n_scalars  uint32
    dims       ndim x uint64
    scalars    n_scalars x float64

followed by the array as little-endian float32 in C order. The sidecar
``<name>.json`` names the scalars and carries everything else (geometry,
beamformer settings, per-frame timings).
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .beamformers import BeamformedVolume, BeamformerKind
from .core import VoxelGrid
from .simulator import ChannelSequence
from .srus import DensityMap, LocalizationEvent

__all__ = [
    "MAGIC",
    "sidecar_path",
    "write_array",
    "read_array",
    "write_sequence",
    "read_sequence",
    "write_volumes",
    "read_volumes",
    "write_density",
    "read_density",
    "write_ground_truth",
    "read_ground_truth",
    "write_events",
    "read_events",
]

MAGIC = b"USBF3D\x00\x01"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_array(path, array: np.ndarray, scalars: dict, meta: dict) -> Path:
    """Write ``array`` (as float32) with named header scalars and a sidecar."""
    path = Path(path)
    a = np.ascontiguousarray(array, dtype="<f4")
    names = list(scalars)
    head = MAGIC + struct.pack("<II", a.ndim, len(names))
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    head += struct.pack(f"<{len(names)}d", *(float(scalars[n]) for n in names))
    with open(path, "wb") as f:
        f.write(head)
        f.write(a.tobytes())
    side = dict(meta)
    side["scalars"] = names
    side["dims"] = list(a.shape)
    side["dtype"] = "float32-le"
    with open(sidecar_path(path), "w") as f:
        json.dump(side, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_array(path) -> tuple[np.ndarray, dict, dict]:
    """Return ``(array, scalars, sidecar)``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a usbf3d array file")
    ndim, n_sc = struct.unpack_from("<II", raw, 8)
    off = 16
    dims = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    vals = struct.unpack_from(f"<{n_sc}d", raw, off)
    off += 8 * n_sc
    count = int(np.prod(dims))
    if len(raw) - off != 4 * count:
        raise ValueError(f"{path}: payload size does not match header dims {dims}")
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims)
    side_p = sidecar_path(path)
    side = json.loads(side_p.read_text()) if side_p.exists() else {}
    names = side.get("scalars", [f"s{i}" for i in range(n_sc)])
    return arr.astype(np.float64), dict(zip(names, vals)), side


def write_sequence(path, seq: ChannelSequence, meta: dict | None = None) -> Path:
    scalars = {"sampling_frequency": seq.sampling_frequency, "t0": seq.t0, "frame_rate": seq.frame_rate}
    return write_array(path, seq.data, scalars, {"kind": "channel_sequence", **(meta or {})})


def read_sequence(path) -> tuple[ChannelSequence, dict]:
    arr, sc, side = read_array(path)
    if side.get("kind", "channel_sequence") != "channel_sequence":
        raise ValueError(f"{path} does not hold a channel sequence")
    if arr.ndim != 3:
        raise ValueError(f"{path}: expected 3D (frames x elements x samples) data")
    return ChannelSequence(arr, sc["t0"], sc["sampling_frequency"], sc["frame_rate"]), side


def _grid_scalars(grid: VoxelGrid) -> dict:
    return {
        "origin_x": grid.origin[0], "origin_y": grid.origin[1], "origin_z": grid.origin[2],
        "spacing_x": grid.spacing[0], "spacing_y": grid.spacing[1], "spacing_z": grid.spacing[2],
    }


def _grid_from(sc: dict, dims) -> VoxelGrid:
    return VoxelGrid(
        (sc["origin_x"], sc["origin_y"], sc["origin_z"]),
        (sc["spacing_x"], sc["spacing_y"], sc["spacing_z"]),
        tuple(dims),
    )


def write_volumes(path, volumes: Sequence[BeamformedVolume], meta: dict | None = None) -> Path:
    """Stack frames of one beamformer into a (frames, nx, ny, nz) file."""
    if not volumes:
        raise ValueError("no volumes to write")
    grid, kind = volumes[0].grid, volumes[0].kind
    data = np.stack([v.values for v in volumes])
    side = {
        "kind": "volume",
        "beamformer": {
            "variant": kind.variant, "p": kind.p, "epsilon": kind.epsilon,
            "cf_normalized": kind.cf_normalized, "axial_step": kind.axial_step,
            "bandwidth": kind.bandwidth, "margin": kind.margin,
        },
        "normalization": volumes[0].normalization,
        "elapsed_s": [v.elapsed for v in volumes],
        **(meta or {}),
    }
    return write_array(path, data, _grid_scalars(grid), side)


def read_volumes(path) -> tuple[list[BeamformedVolume], dict]:
    arr, sc, side = read_array(path)
    if side.get("kind") != "volume" or arr.ndim != 4:
        raise ValueError(f"{path} does not hold beamformed volumes")
    grid = _grid_from(sc, arr.shape[1:])
    kind = BeamformerKind(**side["beamformer"])
    elapsed = side.get("elapsed_s", [0.0] * len(arr))
    vols = [
        BeamformedVolume(grid, np.maximum(a, 0.0), kind, side.get("normalization"), float(t))
        for a, t in zip(arr, elapsed)
    ]
    return vols, side


def write_density(path, density: DensityMap, meta: dict | None = None) -> Path:
    side = {"kind": "density", "dropped": density.dropped, "total": density.total, **(meta or {})}
    return write_array(path, density.counts[None], _grid_scalars(density.grid), side)


def read_density(path) -> DensityMap:
    arr, sc, side = read_array(path)
    if side.get("kind") != "density":
        raise ValueError(f"{path} does not hold a density map")
    counts = np.rint(arr[0]).astype(np.int64)
    return DensityMap(_grid_from(sc, counts.shape), counts, int(side.get("dropped", 0)))


def write_ground_truth(path, truth: np.ndarray) -> Path:
    """Rows of ``(frame, x, y, z, coefficient)``."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame", "x", "y", "z", "coefficient"])
        for row in np.asarray(truth).reshape(-1, 5):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
    return path


def read_ground_truth(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = [[float(r[k]) for k in ("frame", "x", "y", "z", "coefficient")] for r in csv.DictReader(f)]
    return np.array(rows, dtype=float).reshape(-1, 5)


def write_events(path, events: Sequence[LocalizationEvent]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame", "x", "y", "z", "ncc_peak"])
        for e in events:
            w.writerow([e.frame] + [repr(float(v)) for v in e.position] + [repr(float(e.ncc_peak))])
    return path


def read_events(path) -> list[LocalizationEvent]:
    with open(path, newline="") as f:
        return [
            LocalizationEvent(int(r["frame"]), (float(r["x"]), float(r["y"]), float(r["z"])), float(r["ncc_peak"]))
            for r in csv.DictReader(f)
        ]
