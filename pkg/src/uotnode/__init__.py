"""Pearson-regularized unbalanced optimal transport with explicit neural-ODE dynamics."""
from .errors import NumericalError, SpecError, UOTError
from .io import read_density, read_spec, write_spec
from .uot_core import (Coupling, CostGrid, DualPotentials, GridDensity, ProblemSpec, dual_objective,
                       kkt_recover_coupling, kkt_residuals, primal_objective)
from .sinkhorn import compute_params, error_certificate, run
from .monge_ampere import solve_map
from .transport_dynamics import DynamicsFields, evolve, smooth_potentials
from .neural_field import compile_field, eval_network, neural_ode_flow
from .metrics import DiscreteMeasure, dbl_distance, rate_fit
from .pipeline import RunConfig, run_pipeline, write_bundle

__version__ = "0.1.0"
