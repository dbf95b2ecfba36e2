"""Command-line entry points.

Every subcommand writes its outputs plus a ``manifest.<command>.json`` into
the output directory. Exit codes: 0 success, 1 runtime failure (for example a
threshold calibration that cannot reach its target), 2 invalid input or
configuration, 3 insufficient memory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import io as uio
from .beamformers import VARIANTS, BeamformedVolume, CapacityError, beamform_volumes
from .config import DEFAULTS, ConfigError, RunConfig, config_from_dict, load_config
from .metrics import evaluate_psf, format_report, main_lobe_semi_axes, mip, noise_region_between, report_csv, write_pgm
from .simulator import ChannelSequence, add_white_noise, simulate_frame, simulate_tube_phantom_sequence
from .srus import CalibrationError, DensityMap, calibrate_thresholds, run_srus

logger = logging.getLogger("usbf3d")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID, EXIT_CAPACITY = 0, 1, 2, 3


@dataclass
class RunManifest:
    """What produced a set of outputs, and their digests."""

    command: str
    config_hash: str
    seed: int
    version: str = __version__
    stage_times: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    inputs: list = field(default_factory=list)

    def stage(self, name: str, seconds: float):
        self.stage_times[name] = round(float(seconds), 6)

    def add_output(self, path):
        for p in (Path(path), uio.sidecar_path(path)):
            if p.exists():
                self.outputs.append({"path": p.name, "sha256": _sha256(p)})

    def write(self, outdir: Path) -> Path:
        path = outdir / f"manifest.{self.command}.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class _Timer:
    def __init__(self, manifest: RunManifest, name: str):
        self.manifest, self.name = manifest, name

    def __enter__(self):
        self.t = time.perf_counter()

    def __exit__(self, *exc):
        self.manifest.stage(self.name, time.perf_counter() - self.t)


# ---------------------------------------------------------------- helpers


def _config(path: Optional[str], embedded: Optional[dict] = None) -> RunConfig:
    if path:
        return load_config(path)
    if embedded is not None:
        return config_from_dict(embedded, "<embedded>")
    return config_from_dict({}, "<defaults>")


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _methods(text: str) -> list[str]:
    names = [m.strip().lower() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in VARIANTS]
    if bad or not names:
        raise ValueError(f"unknown method {', '.join(bad) or text!r}; valid methods: {', '.join(VARIANTS)}")
    return names


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p} does not exist")
    return p


def _volume_files(paths) -> dict[str, tuple[list[BeamformedVolume], dict]]:
    out = {}
    for p in paths:
        vols, side = uio.read_volumes(_existing(p))
        variant = vols[0].kind.variant
        if variant in out:
            raise ValueError(f"two volume files for {variant}")
        out[variant] = (vols, side)
    return out


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    out = _outdir(args.output)
    man = RunManifest("simulate", cfg.digest, cfg.seed, inputs=[cfg.source])
    geom = cfg.probe()
    acq = cfg.acquisition(geom)
    scene_cfg = cfg["scene"]
    with _Timer(man, "simulate"):
        if scene_cfg["type"] == "tube_phantom":
            t = scene_cfg["tube_phantom"]
            n_frames = args.frames or t["n_frames"]
            tube_a, tube_b = cfg.tubes()
            seq, truth = simulate_tube_phantom_sequence(
                tube_a, tube_b, t["bubble_rate"], t["speed"], n_frames, cfg.seed, geom, acq,
                snr_db=scene_cfg["snr_db"], prefill=t["prefill"], workers=cfg.workers,
            )
        else:
            scene = cfg.scene()
            frame = simulate_frame(scene, geom, acq)
            if scene_cfg["snr_db"] is not None:
                frame = add_white_noise(frame, scene_cfg["snr_db"], cfg.seed)
            seq = ChannelSequence.from_frames([frame], acq.frame_rate)
            pos = scene.positions()
            truth = np.column_stack([np.zeros(len(pos)), pos, scene.coefficients()])
    meta = {"config": cfg.data, "config_hash": cfg.digest}
    with _Timer(man, "write"):
        man.add_output(uio.write_sequence(out / "channels.bin", seq, meta))
        man.add_output(uio.write_ground_truth(out / "ground_truth.csv", truth))
    man.write(out)
    logger.info("wrote %d frame(s) x %d channels to %s", len(seq), seq.data.shape[1], out)
    return EXIT_OK


def cmd_beamform(args) -> int:
    seq, side = uio.read_sequence(_existing(args.sequence))
    cfg = _config(args.config, side.get("config"))
    workers = args.workers or cfg.workers
    methods = _methods(args.method)
    out = _outdir(args.output)
    man = RunManifest("beamform", cfg.digest, cfg.seed, inputs=[str(args.sequence)])
    geom = cfg.probe()
    acq = cfg.acquisition(geom)
    grid = cfg.grid()
    frames = range(len(seq)) if args.frames is None else range(min(args.frames, len(seq)))
    meta = {"config": cfg.data, "config_hash": cfg.digest}
    for m in methods:
        kind = cfg.beamformer(m)
        with _Timer(man, f"beamform_{m}"):
            vols = beamform_volumes(
                seq, grid, [kind], geom, acq, workers=workers, memory_limit=args.memory_limit, frames=frames
            )[m]
        path = uio.write_volumes(out / f"volume_{m}.bin", vols, meta)
        man.add_output(path)
        log = out / f"timing_{m}.csv"
        log.write_text(
            "frame,milliseconds\n" + "".join(f"{f},{v.elapsed * 1e3:.3f}\n" for f, v in zip(frames, vols))
        )
        man.add_output(log)
        logger.info("%s: %d volume(s), %.1f ms/frame", m, len(vols), 1e3 * np.mean([v.elapsed for v in vols]))
    man.write(out)
    return EXIT_OK


def cmd_metrics(args) -> int:
    files = _volume_files(args.volumes)
    first_side = next(iter(files.values()))[1]
    cfg = _config(args.config, first_side.get("config"))
    mcfg = cfg["metrics"]
    out = _outdir(args.output)
    man = RunManifest("metrics", cfg.digest, cfg.seed, inputs=[str(p) for p in args.volumes])
    truth = uio.read_ground_truth(_existing(args.truth))
    centers = truth[truth[:, 0] == args.frame][:, 1:4]
    if len(centers) < 2:
        raise ValueError("metrics need at least two scatterers in the ground truth")
    volumes = {}
    for variant, (vols, _) in files.items():
        if args.frame >= len(vols):
            raise ValueError(f"{variant} volume file has no frame {args.frame}")
        volumes[variant] = vols[args.frame]
    ref_name = args.reference or mcfg["reference"]
    with _Timer(man, "metrics"):
        ref = volumes.get(ref_name)
        if ref is None:
            logger.warning("reference %s not among the inputs; each volume uses its own main-lobe size", ref_name)
        grid = next(iter(volumes.values())).grid
        noise = noise_region_between(grid, centers, mcfg["noise_half_thickness"])
        semi = None if ref is None else main_lobe_semi_axes(ref, centers)
        order = [v for v in VARIANTS if v in volumes]
        results = [evaluate_psf(volumes[v], centers, semi, noise, mcfg["slab"]) for v in order]
    text = format_report(results, f"frame {args.frame}")
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(report_csv(results))
    man.add_output(out / "report.txt")
    man.add_output(out / "report.csv")
    man.write(out)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_srus(args) -> int:
    seq, side = uio.read_sequence(_existing(args.sequence))
    cfg = _config(args.config, side.get("config"))
    workers = args.workers or cfg.workers
    s = cfg["srus"]
    methods = _methods(args.method) if args.method else list(s["methods"])
    out = _outdir(args.output)
    man = RunManifest("srus", cfg.digest, cfg.seed, inputs=[str(args.sequence)])
    geom = cfg.probe()
    acq = cfg.acquisition(geom)
    grid = cfg.grid()
    scfg = cfg.srus()
    kinds = [cfg.beamformer(m) for m in methods]
    with _Timer(man, "srus"):
        if len(seq) == 0:
            sr_grid = grid.refined(s["sr_factor"])
            res = {k.variant: ([], DensityMap(sr_grid, np.zeros(sr_grid.dims, np.int64), 0)) for k in kinds}
        else:
            res = run_srus(seq, grid, kinds, geom, acq, scfg, workers, sr_factor=s["sr_factor"])
    for m, (events, density) in res.items():
        man.add_output(uio.write_events(out / f"events_{m}.csv", events))
        man.add_output(uio.write_density(out / f"density_{m}.bin", density, {"config_hash": cfg.digest}))
        logger.info("%s: %d events (%d outside the map)", m, len(events), density.dropped)
    man.write(out)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    files = _volume_files(args.volumes)
    first_side = next(iter(files.values()))[1]
    cfg = _config(args.config, first_side.get("config"))
    workers = args.workers or cfg.workers
    out = _outdir(args.output)
    man = RunManifest("calibrate-thresholds", cfg.digest, cfg.seed, inputs=[str(p) for p in args.volumes])
    geom = cfg.probe()
    acq = cfg.acquisition(geom)
    scfg = cfg.srus()
    volumes = {v: vols for v, (vols, _) in files.items()}
    templates = {}
    with _Timer(man, "templates"):
        for v, vols in volumes.items():
            templates[v] = scfg.template(vols[0].kind, geom, acq, vols[0].grid.spacing)
    with _Timer(man, "calibrate"):
        found = calibrate_thresholds(volumes, templates, args.target, scfg, args.tolerance, workers=workers)
    result = {v: {"threshold_db": th, "count": n} for v, (th, n) in found.items()}
    path = out / "thresholds.json"
    path.write_text(json.dumps({"target": args.target, "thresholds": result}, indent=2, sort_keys=True) + "\n")
    man.add_output(path)
    man.write(out)
    for v, r in result.items():
        sys.stdout.write(f"{v}: {r['threshold_db']:.2f} dB -> {r['count']} events\n")
    return EXIT_OK


def cmd_mip(args) -> int:
    vols, side = uio.read_volumes(_existing(args.volume))
    db_range = args.db_range or (side.get("config") or DEFAULTS)["metrics"]["db_range"]
    if not 0 <= args.frame < len(vols):
        raise ValueError(f"frame {args.frame} out of range (0..{len(vols) - 1})")
    image = mip(vols[args.frame], args.axis)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    # rows follow the second remaining axis so depth runs down the image
    write_pgm(out, image.T, db_range)
    if args.npy:
        np.save(out.with_suffix(".npy"), image)
    logger.info("wrote %s (%dx%d)", out, image.shape[0], image.shape[1])
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="usbf3d", description="3D coherence beamforming and super-resolution toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate channel data from a config")
    s.add_argument("config", help="YAML run configuration")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.add_argument("--frames", type=int, help="override the tube-phantom frame count")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("beamform", help="beamform a channel sequence into volumes")
    s.add_argument("sequence", help="channels.bin written by 'simulate'")
    s.add_argument("-m", "--method", default="das", help=f"comma-separated methods: {', '.join(VARIANTS)}")
    s.add_argument("-c", "--config", help="config for grid and beamformer settings (default: the sequence's)")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.add_argument("-j", "--workers", type=int, help="worker threads")
    s.add_argument("--frames", type=int, help="only the first N frames")
    s.add_argument("--memory-limit", type=int, help="byte budget for volumes (default: available memory)")
    s.set_defaults(func=cmd_beamform)

    s = sub.add_parser("metrics", help="PSF metrics report for beamformed volumes")
    s.add_argument("volumes", nargs="+", help="volume_*.bin files")
    s.add_argument("-t", "--truth", required=True, help="ground_truth.csv")
    s.add_argument("-c", "--config", help="config for metric settings")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--reference", choices=VARIANTS, help="method whose FWHM sizes the main-lobe regions")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("srus", help="clutter filter, beamform, localize and accumulate")
    s.add_argument("sequence", help="channels.bin written by 'simulate'")
    s.add_argument("-m", "--method", help="comma-separated methods (default: srus.methods)")
    s.add_argument("-c", "--config", help="pipeline config (default: the sequence's)")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.add_argument("-j", "--workers", type=int, help="worker threads")
    s.set_defaults(func=cmd_srus)

    s = sub.add_parser("calibrate-thresholds", help="find per-method thresholds giving a target event count")
    s.add_argument("volumes", nargs="+", help="volume_*.bin files, one per method")
    s.add_argument("-n", "--target", type=int, required=True, help="target number of events")
    s.add_argument("--tolerance", type=float, default=0.1, help="relative count tolerance")
    s.add_argument("-c", "--config", help="pipeline config (default: the volumes')")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.add_argument("-j", "--workers", type=int, help="worker threads")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("mip", help="maximum intensity projection of a volume as a PGM image")
    s.add_argument("volume", help="volume_*.bin file")
    s.add_argument("-o", "--output", required=True, help="output .pgm path")
    s.add_argument("--axis", default="axial", choices=["lateral", "elevation", "axial"])
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--db-range", type=float, help="display dynamic range (default: metrics.db_range)")
    s.add_argument("--npy", action="store_true", help="also save the linear projection as .npy")
    s.set_defaults(func=cmd_mip)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CapacityError as e:
        logger.error("%s", e)
        return EXIT_CAPACITY
    except (ConfigError, ValueError, FileNotFoundError) as e:
        logger.error("%s", e)
        return EXIT_INVALID
    except CalibrationError as e:
        logger.error("%s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
