"""Channel-independent cascaded-MLP traffic forecasting."""

from .model import ModelConfig, STMLP, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit

__all__ = ["ModelConfig", "STMLP", "TrainConfig", "fit", "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
