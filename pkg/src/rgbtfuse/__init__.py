"""Gated thermal-into-RGB token fusion on a numpy autodiff engine, at desk scale."""

from .autodiff import ContractError, DimensionError, Tensor
from .config import TrainConfig, load_config

__version__ = "0.1.0"
