"""Convolutional spectral kernel networks in numpy."""

from .features import (ConvLayerParams, ConvSpec, DenseLayerParams, DenseSpec, InitSchedule,
                       NetworkArchitecture, Variant, initialize)
from .kernels import GaussianSpectralDensity
from .training import ModelState, TrainConfig, train

__all__ = [
    "ConvLayerParams", "ConvSpec", "DenseLayerParams", "DenseSpec", "GaussianSpectralDensity",
    "InitSchedule", "ModelState", "NetworkArchitecture", "TrainConfig", "Variant", "initialize", "train",
]
