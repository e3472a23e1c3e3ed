"""Latent-dynamics emission modeling: JEPA core, LSTM baseline, compression."""

from .jepa import JepaConfig, JepaModel, closed_loop_forecast
from .losses import LossConfig, composite_loss, wmse
from .train import LstmConfig, RunConfig, train_jepa, train_lstm

__all__ = [
    "JepaConfig",
    "JepaModel",
    "LossConfig",
    "LstmConfig",
    "RunConfig",
    "closed_loop_forecast",
    "composite_loss",
    "train_jepa",
    "train_lstm",
    "wmse",
]
