"""From-scratch tensor kernels, reverse-mode gradients, optimizers, and the
assembled rotation-invariant hazard classifier."""

from . import ops
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .layers import (
    ConvLayer,
    DenseLayer,
    GradientSet,
    ParameterSet,
    backward,
    conv_forward,
    dense_forward,
)
from .model import (
    HazardPrediction,
    ModelConfig,
    SubnetPlan,
    format_parameter_summary,
    forward_probs,
    init_params,
    model_forward,
    parameter_summary,
    subnet_forward,
    subnet_plan,
)
from .ops import (
    conv2d,
    cross_entropy,
    dropout,
    maxpool2,
    relu,
    sigmoid,
    softmax,
)
from .optim import AdamState, OptimizerConfig, adam_step, lr_schedule, sgd_step
from .tensor import Tensor, as_tensor, grad

__all__ = [
    "AdamState",
    "Checkpoint",
    "ConvLayer",
    "DenseLayer",
    "GradientSet",
    "HazardPrediction",
    "ModelConfig",
    "OptimizerConfig",
    "ParameterSet",
    "SubnetPlan",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "conv2d",
    "conv_forward",
    "cross_entropy",
    "dense_forward",
    "dropout",
    "format_parameter_summary",
    "forward_probs",
    "grad",
    "init_params",
    "load_checkpoint",
    "lr_schedule",
    "maxpool2",
    "model_forward",
    "ops",
    "parameter_summary",
    "relu",
    "save_checkpoint",
    "sgd_step",
    "sigmoid",
    "softmax",
    "subnet_forward",
    "subnet_plan",
]
