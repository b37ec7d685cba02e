"""Conditional diffusion transformer for time series forecasting, imputation, generation and anomaly detection."""
from .data import TimeSeriesBatch, load_dataset
from .diffusion import NoiseSchedule, ancestral_sample, desk_schedule, make_schedule, training_loss
from .masks import block_mask, random_mask, reconstruction_mask, split, stride_mask
from .model import DenoiserModel, ModelConfig, init_model

__version__ = "0.1.0"
