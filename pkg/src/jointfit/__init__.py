"""Joint mixed-effects and survival modeling with a component formula language.

Models are written as one formula per outcome, mixing fixed effects,
spline/fractional-polynomial time functions, shared random effects, and
expected-value links between outcomes.  Estimation is by maximum
likelihood with numerically integrated nested random effects.
"""

from .basis import FpBasis, RcsBasis, orthogonalize, rcs_knots
from .data import (DataError, Dataset, build_levels, load_table, save_table)
from .estimation import (ConvergenceError, FitControls, FitResult,
                         LikelihoodEngine, fit_from_json, fit_to_json,
                         maximize, start_values, summary_table)
from .evaluator import EvalError, Evaluator
from .formula import (ModelSpec, ParseError, SpecError, Submodel, format_spec,
                      parse_model, parse_spec_text, validate_spec)
from .prediction import (FittedModel, PredictRequest, predict_stat)
from .quadrature import (CovarianceParam, gauss_hermite, gauss_legendre,
                         qmc_nodes, transform_nodes)
from .userfam import (UserFamilyContext, UserFamilyError, get_user_family,
                      register_user_family)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError", "CovarianceParam", "DataError", "Dataset",
    "EvalError", "Evaluator", "FitControls", "FitResult", "FittedModel",
    "FpBasis", "LikelihoodEngine", "ModelSpec", "ParseError",
    "PredictRequest", "RcsBasis", "SpecError", "Submodel",
    "UserFamilyContext", "UserFamilyError", "build_levels", "fit_from_json",
    "fit_to_json", "format_spec", "gauss_hermite", "gauss_legendre",
    "get_user_family", "load_table", "maximize", "orthogonalize",
    "parse_model", "parse_spec_text", "predict_stat", "qmc_nodes",
    "rcs_knots", "register_user_family", "save_table", "start_values",
    "summary_table", "transform_nodes", "validate_spec",
]
