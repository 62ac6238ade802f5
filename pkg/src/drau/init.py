"""Weight initialisers."""
import math

import numpy as np

from .autograd import Tensor

LSTM_INIT_RANGE = 0.08


def glorot_bound(fan_in, fan_out):
    return math.sqrt(6.0 / (fan_in + fan_out))


def glorot_init(shape, rng, name=None):
    """Uniform Glorot init, U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).

    Only 2-d shapes have a fan-in/fan-out; 1-d tensors (biases) are zeros.
    """
    shape = tuple(shape)
    if len(shape) == 1:
        return Tensor(np.zeros(shape), requires_grad=True, name=name)
    if len(shape) != 2:
        # treat leading axes as fan-in
        fan_in, fan_out = int(np.prod(shape[:-1])), shape[-1]
    else:
        fan_in, fan_out = shape
    a = glorot_bound(fan_in, fan_out)
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True, name=name)


def uniform_init(shape, rng, scale=LSTM_INIT_RANGE, name=None):
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)
