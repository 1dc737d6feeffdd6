"""Mixtures of matrix-normals for clustering longitudinal mixed-type data."""

from .config import EMConfig, RunConfig
from .em import EStepStats, FitResult, MMMParams, e_step, fit, init_kmeanspp, init_random, m_step, observed_loglik
from .errors import (
    ConditioningError,
    ConstraintError,
    CovarianceError,
    DegenerateClusterError,
    FitFailedError,
    MMMError,
    NumericalError,
    RegionError,
    SelectionError,
    ShapeError,
    ValidationError,
)
from .matnorm import MatNormParams, condition_on_blocks, constrain_phi, matnorm_logpdf, sample_matnorm, unvec, vec
from .mmn import fit_mmn
from .samplers import McmcConfig, TruncRegion, gibbs_truncated_mvn, moments, orthant_prob_mc, sample_count_posterior
from .schema import MixedDataset, Schema, VariableSpec, discretize, expand_nominal, latent_init_view, thresholds_for
from .selection import KSweepReport, align_clusters, ari, bic, mape, nu_k, select_k
from .simulate import GenConfig, GroundTruth, generate, inject_noise, benchmark_config, run_scenario

__version__ = "0.1.0"
