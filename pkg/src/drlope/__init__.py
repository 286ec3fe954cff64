"""Off-policy evaluation in tabular MDPs with doubly robust, efficient estimators."""

from .errors import IdentifiabilityError, InfeasibleSchemeError, ParseError, SingularSystemError
from .mdp import (
    Policy,
    TabularMdp,
    cumulative_ratio_nu,
    density_ratio_eta,
    discounted_visitation,
    exact_policy_value,
    exact_q,
    exact_v,
    marginal_ratio_mu,
    oracle_w,
    stationary_distribution,
    truncated_q,
)

__version__ = "0.1.0"
