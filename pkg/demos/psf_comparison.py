"""Point-spread functions of the five beamformers on the five-scatterer scene.

Simulates one plane-wave frame of five on-axis scatterers (15 to 25 mm,
coefficients 1.0 to 0.2) with a 32x32 probe, beamforms it with DAS, p-DAS,
CF, CV_N and CV, prints the PSF report and writes one maximum intensity
projection per method as a PGM image.

    python demos/psf_comparison.py --snr 10 --out psf_out

The full grid takes a few minutes on one core; ``--coarse`` uses 100 um
voxels for a quick look (p-DAS still samples its axial line finely).
"""

import argparse
import time
from pathlib import Path

import numpy as np

from usbf3d import (
    VARIANTS,
    AcquisitionConfig,
    ChannelSequence,
    VoxelGrid,
    add_white_noise,
    beamform_volume,
    evaluate_psf,
    format_report,
    mip,
    paper_probe,
    paper_scene_five_scatterers,
    simulate_frame,
)
from usbf3d.metrics import main_lobe_semi_axes, write_pgm


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--snr", type=float, default=10.0, help="channel SNR in dB; omit noise with --clean")
    ap.add_argument("--clean", action="store_true")
    ap.add_argument("--coarse", action="store_true", help="100 um voxels instead of 50 um")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", type=Path, default=Path("psf_out"))
    args = ap.parse_args(argv)

    probe = paper_probe()
    acq = AcquisitionConfig.for_probe(probe, depth_range=(14e-3, 26e-3))
    scene = paper_scene_five_scatterers()
    frame = simulate_frame(scene, probe, acq)
    if not args.clean:
        frame = add_white_noise(frame, args.snr, args.seed)
    seq = ChannelSequence.from_frames([frame], acq.frame_rate)

    # the grid has a voxel exactly on every scatterer
    h = 100e-6 if args.coarse else 50e-6
    grid = VoxelGrid.centered((0, 0, 20e-3), (2e-3, 2e-3, 12e-3), h)
    print(f"grid {grid.dims} at {h * 1e6:.0f} um, {len(scene)} scatterers")

    vols = {}
    for v in VARIANTS:
        t = time.perf_counter()
        vols[v] = beamform_volume(seq, grid, v, probe, acq)[0]
        print(f"  {v:5s} {time.perf_counter() - t:7.1f} s")

    # every method is scored inside the main-lobe regions of DAS
    centers = scene.positions()
    semi = main_lobe_semi_axes(vols["das"], centers)
    results = [evaluate_psf(vols[v], centers, semi) for v in VARIANTS]
    title = "noise-free" if args.clean else f"{args.snr:g} dB channel SNR"
    print()
    print(format_report(results, title))

    args.out.mkdir(parents=True, exist_ok=True)
    for v in VARIANTS:
        # lateral-axial projection, depth down the image
        img = mip(vols[v].values, "elevation").T
        write_pgm(args.out / f"mip_{v}.pgm", img / np.max(img))
    print(f"MIPs written to {args.out}/")


if __name__ == "__main__":
    main()
