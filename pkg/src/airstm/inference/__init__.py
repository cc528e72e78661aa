"""Metropolis-within-Gibbs estimation for the six models."""

from .diagnostics import autocorrelation, diagnostics, effective_sample_size, write_diagnostics
from .ffbs import ffbs_model_b, ffbs_model_c, filter_model_b, filter_model_c
from .mcmc import (
    Chain,
    McmcConfig,
    initial_state,
    read_chain_csv,
    run_chains,
    run_mcmc,
    write_chain_csv,
)
from .updates import (
    AdaptState,
    Transform,
    beta_conditional,
    beta_update,
    enbloc_conditional_parts,
    enbloc_update_u,
    mh_update,
    sample_inverse_gamma,
    variance_conditional,
    variance_gibbs_update,
)

__all__ = [
    "AdaptState",
    "Chain",
    "McmcConfig",
    "Transform",
    "autocorrelation",
    "beta_conditional",
    "beta_update",
    "diagnostics",
    "effective_sample_size",
    "enbloc_conditional_parts",
    "enbloc_update_u",
    "ffbs_model_b",
    "ffbs_model_c",
    "filter_model_b",
    "filter_model_c",
    "initial_state",
    "mh_update",
    "read_chain_csv",
    "run_chains",
    "run_mcmc",
    "sample_inverse_gamma",
    "variance_conditional",
    "variance_gibbs_update",
    "write_chain_csv",
    "write_diagnostics",
]
