"""Misanthrope-type particle systems on the complete graph and their mean-field limit."""

from .kernels import (
    RateKernel,
    StationaryFamily,
    check_misanthrope_condition,
    check_nondegenerate,
    check_sublinear,
    critical_point,
    density,
    ecp,
    from_terms,
    general_table,
    inclusion,
    invert_density,
    marginal,
    parse_kernel,
    partition_function,
    stationary_weights,
    zrp,
)
from .meanfield import (
    MeanFieldState,
    SolverConfig,
    birth_death_rates,
    detailed_balance_residual,
    gronwall_envelope,
    integrate,
    moment,
    rhs,
    stationarity_residual,
)
from .simulate import (
    Configuration,
    EmpiricalTrajectory,
    SimState,
    empirical_measure,
    ensemble_marginal,
    new_simulation,
    run_until,
    step,
    total_jump_rate,
    two_site_statistics,
)

__version__ = "0.1.0"
