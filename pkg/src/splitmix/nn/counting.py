"""Inference-time parameter and MAC accounting.

MACs follow the standard convention: each conv/dense layer contributes
(number of output elements) x (fan-in) multiply-accumulates; normalization,
activations and pooling count zero.  Parameters count everything that ships
with the model at inference, including BN gamma/beta (and both branches of a
dual BN when present).
"""

import numpy as np


def count_params(model) -> int:
    return int(sum(p.size for p in model.params().values()))


def count_macs(model, input_shape=None) -> int:
    shape = tuple(input_shape) if input_shape is not None else model.input_shape
    total = 0
    for layer in model.layers:
        total += layer.macs(shape)
        shape = layer.out_shape(shape)
    return int(total)


def ensemble_params(model, members: int) -> int:
    return members * count_params(model)


def ensemble_macs(model, members: int, input_shape=None) -> int:
    return members * count_macs(model, input_shape)
