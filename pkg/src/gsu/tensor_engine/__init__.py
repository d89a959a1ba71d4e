"""Differentiable array core: tensors, layers, optimizer, checkpoints."""
from .core import (
    DiffTensor, constant, tensor, backward,
    add, sub, mul, neg, scale, matmul, transpose,
    reshape, broadcast_to, concat, slice_axis, gather_rows,
    relu, sigmoid, log, sqrt, sum, mean, max_pool,
    softmax, dropout, layer_norm, smooth_l1,
)
from .nn import Parameter, ParamSet, MLP, linear, residual_add, attention, mse_loss, cross_entropy
from .optim import AdamState, adam_step, cosine_lr
from .gradcheck import grad_check
from .checkpoint import (
    FORMAT_VERSION, CheckpointInfo,
    save_checkpoint, load_checkpoint, inspect_checkpoint,
)
