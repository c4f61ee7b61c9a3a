"""Hybrid LSTM-CNN-Transformer gasoline consumption forecasting."""

from .tensor import GradTape, Tensor
from .rng import SeededRng

__version__ = "0.1.0"

__all__ = ["GradTape", "SeededRng", "Tensor", "__version__"]
