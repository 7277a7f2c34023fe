"""Minimal differentiable-computation kernel: layers, reverse-mode gradients, Adam."""

from .graph import Sequential
from .io import load_graph, save_graph
from .layers import (
    LAYER_KINDS, BatchNorm, BiLSTM, Conv2d, Dense, Dropout, FrameFlatten, GlobalChannelMax,
    Layer, MaxPool2d, NdiffError, ReLU, ShapeError, Softplus, StateError, layer_from_spec,
)
from .optim import Adam, AdamState, NonFiniteGradientError, adam_step

__all__ = [
    "Adam", "AdamState", "BatchNorm", "BiLSTM", "Conv2d", "Dense", "Dropout", "FrameFlatten",
    "GlobalChannelMax", "LAYER_KINDS", "Layer", "MaxPool2d", "NdiffError", "NonFiniteGradientError",
    "ReLU", "Sequential", "ShapeError", "Softplus", "StateError", "adam_step", "layer_from_spec",
    "load_graph", "save_graph",
]
