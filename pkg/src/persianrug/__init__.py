"""Sparse ReLU autoencoder toy model: training, symmetry diagnostics,
Persian rug construction and analytic loss evaluation."""

from .datagen import DataConfig, data_moments, sample_batch
from .kernels import DEFAULT_BACKEND

__all__ = ["DataConfig", "data_moments", "sample_batch", "DEFAULT_BACKEND"]
__version__ = "0.1.0"
