"""Autoregressive transformer for p(b | P, g)."""

from .model import (
    ModelConfig,
    NumericalError,
    backward,
    embed,
    forward_embedded,
    init_params,
    log_probs,
    loss,
    loss_and_grad,
    param_shapes,
    record_log_likelihood,
    sample_outcomes,
)
from .optim import AdamW, cosine_warm_restarts
from .train import DivergenceError, TrainConfig, TrainResult, train

__all__ = [
    "AdamW", "DivergenceError", "ModelConfig", "NumericalError", "TrainConfig", "TrainResult",
    "backward", "cosine_warm_restarts", "embed", "forward_embedded", "init_params", "log_probs",
    "loss", "loss_and_grad", "param_shapes", "record_log_likelihood", "sample_outcomes", "train",
]
