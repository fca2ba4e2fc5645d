from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .layers import (
    BatchNorm,
    ConfigurationError,
    Conv2d,
    DegenerateBatchError,
    Linear,
    MLP,
    Module,
    MultiHeadAttention,
    Parameter,
    batchnorm_forward,
    conv2d_forward,
    linear_forward,
    multihead_attention,
)
from .optim import NonFiniteGradientError, OptimizerState, rmsprop_step
from .tensor import DimensionError, Tensor, concat, relu, sigmoid, softmax, square, stack
