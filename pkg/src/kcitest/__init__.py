"""Kernel-based conditional independence testing."""

from .calibration import (BootstrapConfig, BoundReport, bootstrap_alignment_bound, cantelli_normal_threshold,
                          hoeffding_test, hoeffding_threshold, wild_bootstrap_pvalue)
from .cme import CmeModel, centered_test_gram, fit_cme, loo_select, null_model
from .errors import ConfigError, DegenerateError, NumericalError, QuadratureWarning
from .kernels import KernelSpec, eval_kernel, gram, median_heuristic
from .pipeline import TestConfig, TestResult, run_experiment, run_methods, run_single_test, sweep
from .selection import SelectionConfig, SelectionResult, select_kc
from .statistics import (MomentSummary, empirical_variance_sigma2, gcm_statistic, h_matrix, kci_hsic_unbiased,
                         kci_ustat, population_moments_from_samples, snr_estimate, wgcm_statistic)
from .synthetic import (Dataset, ErrorFunction, RegressionErrorSpec, ScenarioConfig, generate, oracle_kci,
                        oracle_noisy_kci, oracle_noisy_variance, oracle_snr_curve, oracle_variance)

__version__ = "0.1.0"
