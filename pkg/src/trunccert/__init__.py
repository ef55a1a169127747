"""Regime-switching option pricing with certified domain-truncation error."""

from .errors import *  # noqa: F401,F403
from .model import (
    GrowthBounds,
    Payoff,
    PriceField,
    Problem,
    RegimeModel,
    TruncatedDomain,
    evaluate_payoff,
    load_problem,
    payoff_growth_bounds,
    problem_from_dict,
    validate_model,
)

__version__ = "0.1.0"
