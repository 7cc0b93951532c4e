"""Collect-update-distribute temporal encoder for irregular satellite image time series."""

from .data import SynthConfig, generate_grid, generate_pixelset, read_dataset, write_dataset
from .model import Backbone, ExchangerConfig, count_flops, exchanger_forward
from .train import TrainConfig, run_finetune, run_pretrain

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "ExchangerConfig",
    "SynthConfig",
    "TrainConfig",
    "count_flops",
    "exchanger_forward",
    "generate_grid",
    "generate_pixelset",
    "read_dataset",
    "run_finetune",
    "run_pretrain",
    "write_dataset",
]
