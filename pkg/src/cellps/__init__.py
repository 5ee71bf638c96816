"""Two-class processor-sharing cell with one mobile class: exact solvers,
balance fixed point, coupled simulation and heavy-traffic experiments."""

__version__ = "0.1.0"

from .ctmc import (
    Generator,
    ModelDefinitionError,
    PowerIterationError,
    RateModel,
    ReducibleChainError,
    StabilityError,
    TruncatedDistribution,
    TruncationBox,
    TruncationFailureError,
    adapt_truncation,
    build_generator,
    functional,
    stationary_direct,
    stationary_power,
    tv_distance,
)
from .models import (
    ConstrainedParams,
    CouplingParams,
    FreeParams,
    XiStar,
    alpha_rate,
    beta_rate,
    free_rates,
    joint_rates,
    kappa,
    m_of,
    mm1_rates,
    mm1_sandwich_loads,
    mm1_stationary,
    mminfty_rates,
    mminfty_stationary,
    stability_classify,
    xi_star,
    yprime_rates,
    ytilde_rates,
    z_empty_probability,
    z_rates,
)
