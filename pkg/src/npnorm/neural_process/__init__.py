"""Neural-process mixed-effect model for volumetric normative modeling."""
from .estimator import NeuralProcessNormativeModel
from .model import (
    LatentGaussian,
    LossTerms,
    NpModel,
    PredictiveSummary,
    Schedule,
    TrainingError,
    decode,
    elbo_loss,
    encode,
    encode_target,
    gaussian_loglik,
    kl_diag_gaussian,
    predict_distribution,
    sample_latent,
    train,
)
from .network import NpArchitecture
from .quantile import QuantileTransform, VoxelQuantileTransformer, quantile_apply, quantile_fit, quantile_invert

__all__ = [
    "LatentGaussian", "LossTerms", "NeuralProcessNormativeModel", "NpArchitecture", "NpModel",
    "PredictiveSummary", "QuantileTransform", "Schedule", "TrainingError", "VoxelQuantileTransformer",
    "decode", "elbo_loss", "encode", "encode_target", "gaussian_loglik", "kl_diag_gaussian",
    "predict_distribution", "quantile_apply", "quantile_fit", "quantile_invert", "sample_latent", "train",
]
