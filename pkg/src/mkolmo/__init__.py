"""Measure-valued filtering flows, their generators, and Monte Carlo
representations of the associated backward equations."""

__version__ = "0.1.0"

from .measure import ParticleMeasure
from .functionals import (CylindricalFunctional, TestFunction,
                          FUNCTIONAL_REGISTRY, make_functional)
from .models import FilteringModel, MODEL_REGISTRY, make_model
from .sde import (NoisePath, ZakaiFlow, KSFlow, zakai_step, ks_view,
                  derivative_flow, simulate_signal_observation,
                  mass_moment_bounds)
from .generator import (GeneratorEvaluation, apply_L, apply_LKS,
                        ito_residual_zakai, ito_residual_ks,
                        ito_residual_time_dependent, ItoResidualReport)
from .kolmogorov import (MCConfig, KolmogorovEstimate, PDEResidualReport,
                         solve_zakai_kolmogorov, solve_ks_kolmogorov,
                         flat_derivative_u, pde_residual,
                         markov_consistency)
from .config import ExperimentConfig, ConfigError, load_config

__all__ = [
    "__version__",
    "ParticleMeasure", "CylindricalFunctional", "TestFunction",
    "FUNCTIONAL_REGISTRY", "make_functional",
    "FilteringModel", "MODEL_REGISTRY", "make_model",
    "NoisePath", "ZakaiFlow", "KSFlow", "zakai_step", "ks_view",
    "derivative_flow", "simulate_signal_observation", "mass_moment_bounds",
    "GeneratorEvaluation", "apply_L", "apply_LKS",
    "ito_residual_zakai", "ito_residual_ks", "ito_residual_time_dependent",
    "ItoResidualReport",
    "MCConfig", "KolmogorovEstimate", "PDEResidualReport",
    "solve_zakai_kolmogorov", "solve_ks_kolmogorov", "flat_derivative_u",
    "pde_residual", "markov_consistency",
    "ExperimentConfig", "ConfigError", "load_config",
]
