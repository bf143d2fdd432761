"""qt1map: quantitative T1 mapping.

MP2RAGE/MP3RAGE signal simulation, lookup-table and Monte Carlo MAP T1
estimation, two-pool selective-inversion-recovery reference fitting,
synthetic digital phantoms, residual-network calibration, and
comparison statistics.
"""

from .backend import backend_choice
from .calib import (
    CalibModel,
    NetworkConfig,
    PatchDataset,
    SubjectMaps,
    TrainingDivergedError,
    cross_validate,
    extract_patches,
    load_model,
    predict_map,
    save_model,
    train,
)
from .config import ConfigError, RunConfig, derive_seed
from .mp2rage import (
    AcquisitionParams,
    LookupTable,
    ProtocolError,
    build_lookup,
    combine_volumes,
    invert_lookup,
    point_estimate_t1_map,
    robust_combined_image,
    simulate_gre_signals,
    simulate_gre_signals_batch,
)
from .nifti import NiftiError, read_nifti, write_nifti
from .phantom import (
    PhantomSpec,
    SyntheticSubject,
    generate_phantom,
    load_subject,
    save_subject,
    simulate_subject,
    synth_b1_field,
)
from .posterior import (
    GridSpec,
    NoiseModel,
    Posterior,
    PosteriorGrid,
    estimate_noise_sigma,
    map_estimate,
    pgrd_read,
    pgrd_write,
    posterior_from_counts,
    run_monte_carlo,
)
from .sir import (
    SechPulse,
    SirAcquisition,
    SirFitResult,
    SirModelParams,
    fit_sir,
    simulate_inversion_sm,
    sir_signal,
    sir_t1_map,
    sm_vs_b1_table,
)
from .stats import (
    DegenerateTTestError,
    PlausibilityResult,
    TissueMetrics,
    TTestResult,
    bland_altman_table,
    paired_t_test,
    plausibility_check,
    tissue_metrics,
)
from .volume import (
    LABEL_BACKGROUND,
    LABEL_CGM,
    LABEL_NAMES,
    LABEL_SGM,
    LABEL_WM,
    ComplexVolume3D,
    LabelMask,
    Volume3D,
    check_same_grid,
    erode_mask,
)

__version__ = "1.0.0"
