"""Parameterized layers built on the tensor engine.

A :class:`Module` owns named parameters and buffers and finds child modules
by scanning its attributes (lists and tuples of modules included), so
checkpoint names follow the attribute path, e.g.
``blocks.0.units.1.modules.2.coupling.net.blend.weight``.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tape, Tensor


class Module:
    def __init__(self):
        self._params = {}
        self._buffers = {}
        self.training = True

    # -- registration ----------------------------------------------------

    def register_parameter(self, name, array):
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        setattr(self, name, t)
        return t

    def register_buffer(self, name, array):
        self._buffers[name] = np.asarray(array)
        setattr(self, name, self._buffers[name])
        return self._buffers[name]

    def set_buffer(self, name, array):
        self._buffers[name] = np.asarray(array)
        setattr(self, name, self._buffers[name])

    # -- traversal ---------------------------------------------------------

    def _children(self):
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            if isinstance(value, Module):
                yield attr, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{attr}.{i}", item

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for cname, child in self._children():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (prefix + name, b)
        for cname, child in self._children():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def tape(self):
        tape = Tape()
        for name, p in self.named_parameters():
            tape.register(name, p)
        return tape

    def n_parameters(self):
        return sum(p.size for _, p in self.named_parameters())

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    # -- state i/o -----------------------------------------------------

    def state_arrays(self):
        """All persisted state: parameters plus buffers, by name."""
        state = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state["buf." + name] = b
        return state

    def load_state_arrays(self, state):
        for name, p in self.named_parameters():
            arr = state[name]
            if arr.shape != p.data.shape:
                raise ShapeError(
                    f"parameter '{name}' shape {arr.shape} != expected {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)
        buffers = dict(self._walk_buffer_owners())
        for full, (owner, local) in buffers.items():
            arr = state["buf." + full]
            owner.set_buffer(local, arr.astype(owner._buffers[local].dtype, copy=True))

    def _walk_buffer_owners(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, (self, name)
        for cname, child in self._children():
            yield from child._walk_buffer_owners(prefix + cname + ".")


# ---------------------------------------------------------------------------
# layers


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(
        self, in_channels, out_channels, kernel_size, padding=0, rng=None,
        dtype=np.float32, zero_init=False, bias=True,
    ):
        super().__init__()
        self.padding = padding
        k = kernel_size
        shape = (out_channels, in_channels, k, k)
        if zero_init:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = he_normal(rng, shape, in_channels * k * k, dtype)
        self.register_parameter("weight", w)
        if bias:
            self.register_parameter("bias", np.zeros(out_channels, dtype=dtype))
        else:
            self.bias = None

    def __call__(self, x):
        y = T.conv2d(x, self.weight, self.padding)
        if self.bias is not None:
            y = y + T.reshape(self.bias, (1, -1, 1, 1))
        return y


class Linear(Module):
    """Affine map over the last axis; weight is stored (in, out).

    ``init_scale`` overrides He initialization with a plain scaled normal
    (attention projections use 0.02 so attention starts near uniform).
    """

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32,
                 zero_init=False, bias=True, init_scale=None):
        super().__init__()
        shape = (in_features, out_features)
        if zero_init:
            w = np.zeros(shape, dtype=dtype)
        elif init_scale is not None:
            w = (rng.standard_normal(shape) * init_scale).astype(dtype)
        else:
            w = he_normal(rng, shape, in_features, dtype)
        self.register_parameter("weight", w)
        if bias:
            self.register_parameter("bias", np.zeros(out_features, dtype=dtype))
        else:
            self.bias = None

    def __call__(self, x):
        # fold leading axes into one GEMM
        lead = x.shape[:-1]
        y = T.matmul(T.reshape(x, (-1, x.shape[-1])), self.weight)
        y = T.reshape(y, lead + (self.weight.shape[1],))
        if self.bias is not None:
            y = y + self.bias
        return y


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics.

    Training mode normalizes with the current batch (batch size >= 2
    required) and updates the running statistics; evaluation mode uses the
    frozen running statistics, so evaluation is deterministic.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.register_parameter("gamma", np.ones(channels, dtype=dtype))
        self.register_parameter("beta", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def __call__(self, x):
        if self.training:
            if x.shape[0] < 2:
                raise ConfigError(
                    "batch normalization in training mode needs batch size >= 2, "
                    f"got {x.shape[0]}"
                )
            mu = T.tmean(x, axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = T.tmean(centered * centered, axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.set_buffer(
                "running_mean",
                (1 - m) * self.running_mean + m * mu.data.reshape(-1),
            )
            self.set_buffer(
                "running_var",
                (1 - m) * self.running_var + m * var.data.reshape(-1),
            )
            inv = T.power(var + self.eps, -0.5)
            xhat = centered * inv
        else:
            mu = self.running_mean.reshape(1, -1, 1, 1)
            inv = 1.0 / np.sqrt(self.running_var.reshape(1, -1, 1, 1) + self.eps)
            xhat = (x - mu) * inv
        gamma = T.reshape(self.gamma, (1, -1, 1, 1))
        beta = T.reshape(self.beta, (1, -1, 1, 1))
        return xhat * gamma + beta


class PositionalEmbedding2d(Module):
    """Learned additive per-position embedding for the attention branch."""

    def __init__(self, channels, height, width, rng, dtype=np.float32, scale=0.02):
        super().__init__()
        emb = (rng.standard_normal((1, channels, height, width)) * scale).astype(dtype)
        self.register_parameter("embedding", emb)

    def __call__(self, x):
        return x + self.embedding
