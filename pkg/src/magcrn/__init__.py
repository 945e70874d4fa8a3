"""Spatiotemporal graph recurrent forecasting conditioned on past and future covariates."""

from .errors import MagcrnError
from .nn import ModelConfig, init_parameters, magcrn_forward, predict

__all__ = ["MagcrnError", "ModelConfig", "init_parameters", "magcrn_forward", "predict"]
__version__ = "0.1.0"
