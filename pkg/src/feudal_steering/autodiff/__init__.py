"""Minimal reverse-mode automatic differentiation over float64 arrays."""
from .ops import (
    ACTIVATIONS,
    LOSSES,
    activation,
    add,
    add_bias,
    avg_pool2,
    concat,
    conv1d,
    conv2d,
    conv3d,
    dropout,
    elu,
    group_norm,
    index,
    linear,
    lstm_step,
    mae_loss,
    matmul,
    mean,
    mean_axes,
    mse_loss,
    mul,
    permute,
    relu,
    reshape,
    rmse_loss,
    scale,
    sigmoid,
    sub,
    sum,
    tanh,
    unfold_depth,
    window_mean,
)
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .tensor import Tensor, as_tensor, backward, grad_enabled, graph_nodes, no_grad

__all__ = [
    "ACTIVATIONS", "LOSSES", "Adam", "AdamState", "Tensor", "activation", "adam_step", "add",
    "add_bias", "as_tensor", "avg_pool2", "backward", "clip_grad_norm", "concat", "conv1d",
    "conv2d", "conv3d", "dropout", "elu", "grad_enabled", "graph_nodes", "group_norm", "index",
    "linear", "lstm_step", "mae_loss", "matmul", "mean", "mean_axes", "mse_loss", "mul",
    "no_grad", "permute", "relu", "reshape", "rmse_loss", "scale", "sigmoid", "sub", "sum",
    "tanh", "unfold_depth", "window_mean",
]
