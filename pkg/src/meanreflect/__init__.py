"""Monte Carlo simulation of mean-reflected stochastic heat equations and a
verification harness for the associated transport-entropy inequality."""
from .constants import ConstantEnv, log_c1, log_c2, log_c_t2e, log_c_tpe, log_c_tq
from .errors import (
    BlowUpError,
    CheckFailure,
    ConfigurationError,
    ContractError,
    DataError,
    DomainError,
    MeanReflectError,
    NumericalContractError,
)
from .grid import SpaceTimeGrid
from .kernel import HeatKernelConfig, eval_kernel, heat_propagate, kernel_row_integrals
from .noise import DriftField, GirsanovDensity, NoiseSheet, entropy_of_drift, log_density, sample_sheet, shift_sheet
from .reflect import GeneralObstacle, LinearObstacle, ReflectionMeasure, general_push, linear_push, make_obstacle
from .solver import CoefficientSpec, Ensemble, Trajectory, fd_step, mild_solve_small, solve_mean_reflected
from .transport import (
    CouplingReport,
    EmpiricalMeasure1D,
    concentration_profile,
    run_coupling,
    t2_marginal_check,
    w2_quantile_1d,
)

__version__ = "0.1.0"
