from shearad.models.autoencoders import AEConfig, ConvAE, ConvAEConfig, FullyConnectedAE, reconstruction_error
from shearad.models.preprocess import preprocess
from shearad.models.stfpm import (
    STFPM,
    ResNetPyramid,
    STFPMConfig,
    ToyPyramid,
    load_teacher,
    stfpm_layer_distance,
    stfpm_loss,
)
from shearad.models.training import (
    Hyperparams,
    TrainedModel,
    anomaly_maps,
    latent_features,
    load_model,
    reconstruction_errors,
    save_model,
    train,
)

__all__ = [
    "AEConfig",
    "ConvAE",
    "ConvAEConfig",
    "FullyConnectedAE",
    "reconstruction_error",
    "preprocess",
    "STFPM",
    "ResNetPyramid",
    "STFPMConfig",
    "ToyPyramid",
    "load_teacher",
    "stfpm_layer_distance",
    "stfpm_loss",
    "Hyperparams",
    "TrainedModel",
    "anomaly_maps",
    "latent_features",
    "load_model",
    "reconstruction_errors",
    "save_model",
    "train",
]
