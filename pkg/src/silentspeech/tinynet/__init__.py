"""Small numpy engine for 1D residual CNNs and MLPs with hand-written backprop."""

from .checkpoint import load_checkpoint, save_checkpoint
from .core import (
    ArchConfig,
    Model,
    backward,
    build_model,
    features,
    forward,
    forward_trace,
    input_gradient,
    param_specs,
    student_config,
    STUDENT_BLOCKS,
    teacher_config,
)
from .flops import count_flops, layer_flops
from .gradcheck import grad_check, grad_check_report
from .losses import kl_divergence, log_softmax, loss_ce, loss_distill, softmax
from .optim import AdamState, DistillConfig, TrainConfig, minibatches, train_step

__all__ = [
    "ArchConfig",
    "Model",
    "AdamState",
    "DistillConfig",
    "TrainConfig",
    "backward",
    "build_model",
    "count_flops",
    "features",
    "forward",
    "forward_trace",
    "grad_check",
    "grad_check_report",
    "input_gradient",
    "kl_divergence",
    "layer_flops",
    "load_checkpoint",
    "log_softmax",
    "loss_ce",
    "loss_distill",
    "minibatches",
    "param_specs",
    "save_checkpoint",
    "softmax",
    "student_config",
    "STUDENT_BLOCKS",
    "teacher_config",
    "train_step",
]
