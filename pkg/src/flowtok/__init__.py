"""Desk-scale 1D causal image tokenizer with a mean-velocity flow decoder."""

from . import argen, checkpoint, config, data, flowmath, metrics, nets, repa, sampling, traintok

__version__ = "0.1.0"

__all__ = [
    "argen",
    "checkpoint",
    "config",
    "data",
    "flowmath",
    "metrics",
    "nets",
    "repa",
    "sampling",
    "traintok",
    "__version__",
]
