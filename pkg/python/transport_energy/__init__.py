"""Optimal transport densities by minimization of the regularized transport energy.

The public API is re-exported here so users can ``import transport_energy``
and reach grids and sources (:mod:`.grid`), the weighted Neumann solver
(:mod:`.elliptic`), the energy and its subgradients (:mod:`.energy`), the
gradient flow (:mod:`.flow`), the weak-* distance and JKO steps
(:mod:`.metric`) and the optimality diagnostics (:mod:`.diagnostics`).
Experiments are driven from TOML files by ``transport-energy run``.
"""

from .config import ExperimentConfig, load_config, parse_config
from .diagnostics import (
    ResidualReport,
    brute_force_minimize,
    compare_minimizers,
    mk_residuals,
    oracle_1d,
    regularized_residuals,
)
from .elliptic import Potential, RegParams, SolveReport, dirichlet_energy, flux_residual, solve_weighted_neumann
from .energy import (
    Density,
    EnergyBreakdown,
    Evaluation,
    MassBalance,
    SolveCache,
    eval_energy,
    evaluate,
    grad_E,
    mass_balance,
    minimal_subgradient,
    p_laplacian,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DensityError,
    GridError,
    NonReproducibleOptimumError,
    ParameterError,
    SourceError,
    StiffStateError,
    TransportEnergyError,
)
from .export import read_field_csv, write_field_csv
from .flow import FlowConfig, FlowResult, FlowState, flow_step, paired_distance, run_flow
from .grid import (
    EdgeField,
    Grid,
    ScalarField,
    SourceData,
    SourcePiece,
    build_grid,
    div,
    domain_for_support,
    grad,
    inner,
    integrate,
    make_source,
)
from .metric import (
    DwBasis,
    EviReport,
    JkoConfig,
    JkoResult,
    JkoStepResult,
    build_dw_basis,
    dw,
    dw_tail_bound,
    evi_residual,
    jko_step,
    moments,
    run_jko,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "Density",
    "DensityError",
    "DwBasis",
    "EdgeField",
    "EnergyBreakdown",
    "Evaluation",
    "EviReport",
    "ExperimentConfig",
    "FlowConfig",
    "FlowResult",
    "FlowState",
    "Grid",
    "GridError",
    "JkoConfig",
    "JkoResult",
    "JkoStepResult",
    "MassBalance",
    "NonReproducibleOptimumError",
    "ParameterError",
    "Potential",
    "RegParams",
    "ResidualReport",
    "ScalarField",
    "SolveCache",
    "SolveReport",
    "SourceData",
    "SourceError",
    "SourcePiece",
    "StiffStateError",
    "TransportEnergyError",
    "brute_force_minimize",
    "build_dw_basis",
    "build_grid",
    "compare_minimizers",
    "dirichlet_energy",
    "div",
    "domain_for_support",
    "dw",
    "dw_tail_bound",
    "eval_energy",
    "evaluate",
    "evi_residual",
    "flow_step",
    "flux_residual",
    "grad",
    "grad_E",
    "inner",
    "integrate",
    "jko_step",
    "load_config",
    "make_source",
    "mass_balance",
    "minimal_subgradient",
    "mk_residuals",
    "moments",
    "oracle_1d",
    "p_laplacian",
    "paired_distance",
    "parse_config",
    "read_field_csv",
    "regularized_residuals",
    "run_flow",
    "run_jko",
    "solve_weighted_neumann",
    "write_field_csv",
]
