"""Batch-sampling load balancing: exact n-server chain, mean-field ODE and Gaussian diffusion limit."""

from .core import (
    CountVector,
    CovMatrix,
    FluctuationVector,
    NumericalError,
    QueuePMF,
    SystemParams,
    TruncationConfig,
    TruncationLeakWarning,
    ValidationError,
    d0_distance,
    normalize,
    pmf_from_counts,
    spawn_rng,
)
from .covariance import phi_matrix, phi_powerd, sqrt_psd, zbar_diag, zbar_offdiag
from .ctmc import CtmcState, sample_configuration, simulate, step
from .diffusion import reconstruct, simulate_sde
from .drift import drift_G, drift_G_powerd, xi_components
from .experiments import bench, metrics, run_coverage
from .fluid import solve_ode
from .rates import (
    Configuration,
    arrival_component_oracle,
    drift_F,
    drift_F_powerd,
    enumerate_configs,
    jump_vector,
    zeta_bar,
    zeta_exact,
)
from .validation import covariation_check, lln_convergence_study

__version__ = "0.1.0"
