"""Second-moment loss for dropout-network uncertainty in regression, with baselines and metrics."""

from .estimators import (EstimatorKind, PredictiveEstimate, TrainConfig, TrainedModel, predict,
                         subnetwork_samples, train_estimator)
from .losses import gaussian_nll, mse_loss, sml_batch_loss, sml_terms
from .metrics import MetricReport, ece, ks_to_std_normal, rmse, wasserstein_to_std_normal

__version__ = "0.1.0"
