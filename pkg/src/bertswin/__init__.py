"""Desk-scale BertsWin masked autoencoder, structural losses, GCond optimizer and analysis tools."""
from .errors import BertsWinError, ConfigError, ContractError, DimensionError
from .model import MaskedAutoencoder, MaskPlan, ModelConfig, sample_mask
from .tensor import Tensor

__all__ = ["BertsWinError", "ConfigError", "ContractError", "DimensionError", "MaskedAutoencoder",
           "MaskPlan", "ModelConfig", "Tensor", "sample_mask"]
__version__ = "0.1.0"
