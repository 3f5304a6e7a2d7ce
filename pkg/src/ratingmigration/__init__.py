"""Credit rating migration models: CTMC estimation with inference, and rating momentum."""

from .calibrated import reference_generator, reference_model
from .core import (DiscretePanel, EntityTrack, EventHistory, PanelObservation, RatingScale, Terminal,
                   discretize, parse_continuous_csv, parse_discrete_csv)
from .ctmc import (AllowedPairs, GeneratorMatrix, allowed_pairs, complete_data_log_likelihood,
                   mle_continuous, panel_log_likelihood, tpm)
from .em import EmConfig, EmResult, em_fit, expected_stats
from .errors import (BoundaryWarning, ConvergenceError, ConvergenceWarning, DataError,
                     ImpossibleTransitionError, NotPositiveDefiniteError, NumericalError,
                     RatingMigrationError)
from .matexp import d2expm_block, dexpm_block, expm
from .mcmc import McmcConfig, PosteriorChain, fit_mcmc, posterior_summary, split_rhat
from .momentum import (MomentumModel, MomentumParams, compensator, fit_momentum_mle, intensity,
                       mark_probability, mpp_log_likelihood)
from .selection import BicReport, CoxTestResult, bic_compare, cox_momentum_test
from .simulate import SimConfig, empirical_tpm, monte_carlo_tpm, simulate_ctmc, simulate_momentum
from .wald import hessian, pd_curve, score, tpm_sensitivity, wald_intervals

__version__ = "0.1.0"
