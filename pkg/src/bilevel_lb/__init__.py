"""Hard bilevel instances, oracles and certification tools for first-order lower bounds."""
from .instance import (
    DETERMINISTIC, STOCHASTIC, BilevelPoint, DerivedInstanceParams, FunctionClassParams,
    derive_params,
)
from .hyper import hyper_eval, lower_level_solution, stationarity

__version__ = "0.1.0"

__all__ = [
    "DETERMINISTIC", "STOCHASTIC", "BilevelPoint", "DerivedInstanceParams",
    "FunctionClassParams", "derive_params", "hyper_eval", "lower_level_solution",
    "stationarity", "__version__",
]
