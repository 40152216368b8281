"""Localized particle filtering for a stochastic rotating shallow-water model."""

__version__ = "0.1.0"

from .grid import (
    Decomposition,
    GridSpec,
    Rect,
    StaggeredState,
    apply_boundary_conditions,
    build_decomposition,
    region_distance,
    restrict_field,
)
from .noise import (
    JitterBasis,
    NoiseBasis,
    build_jitter_basis,
    build_noise_basis,
    calibrate_sigma_noise,
    quad_variation_rate,
    sample_jitter_field,
)
from .swe import ModelParams, SolverBlowup, propagate, rk4_step
from .observations import ObservationBatch, ObservationSchedule, global_log_likelihood, synthesize
from .filtering import (
    Ensemble,
    TemperingConfig,
    ess,
    find_temperature,
    normalize_weights,
    pf_assimilate,
    resample_sus,
    temper,
    tempered_weights,
)
from .localization import LocalizationConfig, gaspari_cohn, lpf_assimilate, merge_global
from .metrics import crps_obs, emre, rb, res, rmse_obs
from .experiment import ExperimentConfig, RunRecord, load_config, run_twin_experiment
