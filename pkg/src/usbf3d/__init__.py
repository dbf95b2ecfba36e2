"""3D coherence beamforming (DAS, p-DAS, CF, CV_N, CV) for matrix-array
plane-wave ultrasound, PSF metrics and a super-resolution localization
pipeline."""

__version__ = "0.1.0"

from .core import (
    AcquisitionConfig,
    ArrayGeometry,
    Scatterer,
    Scene,
    VoxelGrid,
    build_matrix_array,
    paper_probe,
    paper_scene_five_scatterers,
)
from .simulator import (
    ChannelFrame,
    ChannelSequence,
    add_white_noise,
    crossing_tubes,
    simulate_frame,
    simulate_tube_phantom_sequence,
)
from .delayline import analytic_signal, gather_delayed_samples, receive_apodization
from .beamformers import (
    VARIANTS,
    BeamformedVolume,
    BeamformerKind,
    CapacityError,
    beamform_frame,
    beamform_volume,
    beamform_volumes,
)
from .metrics import PsfMetrics, evaluate_psf, format_report, fwhm, mip
from .srus import (
    ClutterFilterConfig,
    DensityMap,
    LocalizationEvent,
    SrusConfig,
    calibrate_thresholds,
    estimate_psf_template,
    localize_sequence,
    ncc3d,
    run_srus,
    svd_clutter_filter,
)
