"""Minimal float64 autodiff core: tensors, layers, Adam, parameter files."""
from evamp.ndcore.tensor import (
    Tape, Tensor, active_tape, backward, concat, exp, gelu, getitem, log, matmul, mean,
    mse, parameter, relu, reshape, sigmoid, softmax, sqrt, stack, take_rows, tanh, transpose,
    tsum,
)
from evamp.ndcore.layers import (
    AttentionParams, EmbeddingParams, GruCellParams, LayerNormParams, LinearParams,
    attention_weights, embed, forward_linear, gru_step, layer_norm, linear, load_into,
    multi_head_attention, named_parameters, uniform_init, zeros,
)
from evamp.ndcore.optim import Adam, AdamState, adam_apply, zero_grad
from evamp.ndcore.serialize import dumps_params, load_params, loads_params, save_params

