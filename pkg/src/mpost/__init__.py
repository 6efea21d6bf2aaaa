"""Parametric martingale posteriors by predictive resampling."""
__version__ = "0.1.0"

from .errors import (BatchFailure, DataError, DomainError, MPostError, ModelError,
                     NumericalError)
from .models import (ExponentialScale, ModelFamily, MomentBound, MultivariateNormal,
                     NormalKnownVar, NormalMeanVar, NormalVarianceOnly, StudentTLocation,
                     make_family)
from .regression import (DesignMatrix, LogisticTruncated, NormalLinear, RobustTLinear,
                         make_regression)
from .resampler import (ChainState, PosteriorDraws, ResampleConfig, batch_sample,
                        hybrid_draw, principal_sqrt, step_chain, tail_weight)
from .estimators import EstimatorSpec, estimate
from .stats import Scenario, coverage_experiment, credible_interval, kde, ks_two_sample
