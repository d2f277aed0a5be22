"""Invertible building blocks: each exposes forward-with-log-det (graph
mode, per-example log-dets in nats) and an exact numpy inverse.

The inverse path never builds a gradient graph; sampling is a single pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import tensor as T
from .errors import DataFormatError, NumericDomainError, ShapeError
from .nn import Conv2d, Module
from .tensor import Tensor, no_grad

LOG_2PI = math.log(2.0 * math.pi)
LOG_256 = math.log(256.0)


@dataclass
class LikelihoodTerms:
    """Per-example log-density contributions, kept separate for diagnostics.

    ``logdet`` collects every bijection log-det including the cross-unit
    diag(sigma) terms; ``noise`` the -ln p*(e) importance weights; ``prior``
    the factor-out and termination Gaussian scores; ``dequant`` the pixel
    scaling correction minus ln q(u|x). The bound is their sum.
    """

    logdet: np.ndarray
    noise: np.ndarray
    prior: np.ndarray
    dequant: np.ndarray

    @classmethod
    def zeros(cls, batch):
        z = np.zeros(batch)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())

    @property
    def total(self):
        return self.logdet + self.noise + self.prior + self.dequant


def gaussian_logprob(z, mean, log_std):
    """ln N(z; mean, exp(log_std)) summed over non-batch axes (graph mode)."""
    axes = tuple(range(1, z.ndim))
    centered = (z - mean) * T.exp(-log_std) if isinstance(log_std, Tensor) else (
        (z - mean) * np.exp(-np.asarray(log_std))
    )
    quad = T.tsum(centered * centered, axis=axes)
    if isinstance(log_std, Tensor):
        sig = T.tsum(T.mul(log_std, np.ones_like(z.data)), axis=axes)
    else:
        sig = np.broadcast_to(np.asarray(log_std), z.shape).sum(axis=axes)
    dims = int(np.prod(z.shape[1:]))
    return -0.5 * quad - sig - 0.5 * LOG_2PI * dims


def standard_normal_logprob_np(z):
    axes = tuple(range(1, z.ndim))
    dims = int(np.prod(z.shape[1:]))
    return -0.5 * (z * z).sum(axis=axes) - 0.5 * LOG_2PI * dims


class Bijection(Module):
    """Forward with log-det plus exact inverse; call counters support the
    structural single-pass sampling assertions."""

    def __init__(self):
        super().__init__()
        self.forward_calls = 0
        self.inverse_calls = 0

    def forward(self, x):
        raise NotImplementedError

    def inverse(self, y):
        raise NotImplementedError

    def _ones(self, batch, dtype):
        return np.ones(batch, dtype=dtype)


class ActNorm(Bijection):
    """Per-channel affine y = s * x + b with data-dependent initialization.

    The first forward batch sets s = 1/(std + 1e-6), b = -mean * s so that
    the initial batch comes out with zero mean and unit variance per channel.
    """

    MIN_SCALE = 1e-12

    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.register_parameter("scale", np.ones(channels, dtype=dtype))
        self.register_parameter("bias", np.zeros(channels, dtype=dtype))
        self.register_buffer("initialized", np.zeros(1, dtype=np.uint8))

    def initialize_from(self, x_data):
        mean = x_data.mean(axis=(0, 2, 3))
        std = x_data.std(axis=(0, 2, 3))
        s = 1.0 / (std + 1e-6)
        self.scale.data = s.astype(self.scale.dtype)
        self.bias.data = (-mean * s).astype(self.bias.dtype)
        self.set_buffer("initialized", np.ones(1, dtype=np.uint8))

    def forward(self, x):
        self.forward_calls += 1
        if not self.initialized[0]:
            self.initialize_from(x.data if isinstance(x, Tensor) else x)
        if np.abs(self.scale.data).min() < self.MIN_SCALE:
            raise NumericDomainError("actnorm", "singular per-channel scale")
        b, _, h, w = x.shape
        s = T.reshape(self.scale, (1, -1, 1, 1))
        bias = T.reshape(self.bias, (1, -1, 1, 1))
        y = x * s + bias
        ld = T.tsum(T.log(T.absolute(self.scale))) * (h * w)
        logdet = ld * Tensor(self._ones(b, x.dtype))
        return y, logdet

    def inverse(self, y):
        self.inverse_calls += 1
        s = self.scale.data.reshape(1, -1, 1, 1)
        b = self.bias.data.reshape(1, -1, 1, 1)
        return (y - b) / s


class InvConv1x1(Bijection):
    """Invertible per-pixel channel mix W = P L (U + diag(s)).

    P is a fixed permutation, L unit-lower-triangular, U strictly upper,
    s is stored as a fixed sign and a trainable log-magnitude, so the
    log-det is h*w*sum(log|s|) with no determinant evaluation. W starts
    as a random orthogonal matrix (log-det exactly zero).
    """

    def __init__(self, channels, rng, dtype=np.float32):
        super().__init__()
        c = channels
        q, _ = np.linalg.qr(rng.standard_normal((c, c)))
        p, lo, up = scipy.linalg.lu(q)
        d = np.diag(up).copy()
        self.register_buffer("perm", p.astype(dtype))
        self.register_buffer("sign_s", np.sign(d).astype(dtype))
        self.register_buffer("lower_mask", np.tril(np.ones((c, c)), -1).astype(dtype))
        self.register_buffer("upper_mask", np.triu(np.ones((c, c)), 1).astype(dtype))
        self.register_parameter("lower", lo.astype(dtype))
        self.register_parameter("upper", up.astype(dtype))
        self.register_parameter("log_s", np.log(np.abs(d)).astype(dtype))

    def _weight(self):
        c = self.log_s.shape[0]
        eye = np.eye(c, dtype=self.log_s.dtype)
        lo = self.lower * Tensor(self.lower_mask) + Tensor(eye)
        s_vec = Tensor(self.sign_s) * T.exp(self.log_s)
        up = self.upper * Tensor(self.upper_mask) + Tensor(eye) * s_vec
        return T.matmul(Tensor(self.perm), T.matmul(lo, up))

    def _weight_np(self):
        c = self.log_s.shape[0]
        eye = np.eye(c, dtype=self.log_s.dtype)
        lo = self.lower.data * self.lower_mask + eye
        up = self.upper.data * self.upper_mask + eye * (
            self.sign_s * np.exp(self.log_s.data)
        )
        return lo, up

    def forward(self, x):
        self.forward_calls += 1
        b, c, h, w = x.shape
        w_mat = self._weight()
        xt = T.reshape(T.transpose(x, (1, 0, 2, 3)), (c, b * h * w))
        yt = T.matmul(w_mat, xt)
        y = T.transpose(T.reshape(yt, (c, b, h, w)), (1, 0, 2, 3))
        logdet = (T.tsum(self.log_s) * (h * w)) * Tensor(self._ones(b, x.dtype))
        return y, logdet

    def inverse(self, y):
        self.inverse_calls += 1
        b, c, h, w = y.shape
        lo, up = self._weight_np()
        flat = y.transpose(1, 0, 2, 3).reshape(c, -1)
        z = self.perm.T @ flat
        z = scipy.linalg.solve_triangular(lo, z, lower=True, unit_diagonal=True)
        z = scipy.linalg.solve_triangular(up, z, lower=False)
        return z.reshape(c, b, h, w).transpose(1, 0, 2, 3)

    def min_abs_s(self):
        return float(np.exp(self.log_s.data).min())


class AffineCoupling(Bijection):
    """Channel-split affine coupling; the conditioning half passes through.

    The split puts ceil(c/2) channels in the first part;
    ``transformed_first`` flips which part is transformed so consecutive
    modules cover all channels.
    """

    def __init__(self, net, transformed_first=False):
        super().__init__()
        self.net = net
        self.transformed_first = transformed_first

    @staticmethod
    def split_sizes(channels):
        first = (channels + 1) // 2
        return first, channels - first

    def forward(self, x):
        self.forward_calls += 1
        c = x.shape[1]
        c1, c2 = self.split_sizes(c)
        xa, xb = T.split(x, (c1, c2), axis=1)
        if self.transformed_first:
            cond, target = xb, xa
        else:
            cond, target = xa, xb
        s, t = self.net.scale_and_shift(cond)
        y_t = target * s + t
        parts = (y_t, cond) if self.transformed_first else (cond, y_t)
        y = T.concat(parts, axis=1)
        logdet = T.tsum(T.log(s), axis=(1, 2, 3))
        return y, logdet

    def inverse(self, y):
        self.inverse_calls += 1
        c = y.shape[1]
        c1, c2 = self.split_sizes(c)
        ya, yb = y[:, :c1], y[:, c1:]
        cond, y_t = (yb, ya) if self.transformed_first else (ya, yb)
        with no_grad():
            s, t = self.net.scale_and_shift(Tensor(cond))
        x_t = (y_t - t.data) / s.data
        parts = (x_t, cond) if self.transformed_first else (cond, x_t)
        return np.concatenate(parts, axis=1)


class Squeeze(Bijection):
    """Space-to-channel reshape; an element permutation, log-det zero."""

    def forward(self, x):
        self.forward_calls += 1
        y = T.space_to_channel(x)
        return y, Tensor(np.zeros(x.shape[0], dtype=x.dtype))

    def inverse(self, y):
        self.inverse_calls += 1
        with no_grad():
            return T.channel_to_space(Tensor(y)).data


class FactorOut(Bijection):
    """Split channels in half and score the dropped half under a
    conditional diagonal Gaussian read off the retained half.

    The conditioner is one zero-initialized 3x3 convolution, so the prior
    is exactly N(0, I) at initialization; ``conditional=False`` freezes it
    there.
    """

    def __init__(self, channels, rng=None, conditional=True, dtype=np.float32):
        super().__init__()
        if channels % 2:
            raise ShapeError(f"factor_out needs even channels, got {channels}")
        self.half = channels // 2
        self.conditional = conditional
        if conditional:
            self.prior_net = Conv2d(
                self.half, channels, 3, padding=1, rng=rng, dtype=dtype, zero_init=True
            )

    def _prior_params(self, retained):
        if self.conditional:
            out = self.prior_net(retained)
            mean, log_std = T.split(out, (self.half, self.half), axis=1)
            return mean, log_std
        zeros = np.zeros((1,) + tuple(retained.shape[1:]), dtype=retained.dtype)
        return Tensor(zeros), Tensor(zeros)

    def forward(self, x):
        self.forward_calls += 1
        retained, dropped = T.split(x, (self.half, self.half), axis=1)
        mean, log_std = self._prior_params(retained)
        prior_lp = gaussian_logprob(dropped, mean, log_std)
        return retained, dropped, prior_lp

    def inverse(self, retained, rng, temperature=1.0):
        self.inverse_calls += 1
        b = retained.shape[0]
        shape = (b, self.half) + tuple(retained.shape[2:])
        with no_grad():
            mean, log_std = self._prior_params(Tensor(retained))
        eps = rng.standard_normal(shape).astype(retained.dtype)
        dropped = mean.data + np.exp(log_std.data) * temperature * eps
        return np.concatenate([retained, dropped], axis=1)


def check_pixels(x_discrete):
    x = np.asarray(x_discrete)
    if x.min() < 0 or x.max() > 255:
        raise DataFormatError(
            f"pixel values outside [0, 255]: min {x.min()}, max {x.max()}"
        )
    return x


class UniformDequantizer(Module):
    """x_cont = (x + u)/256 with u ~ U[0,1)^d; penalty is identically zero
    and the scaling bijection contributes -d*ln 256."""

    variational = False

    def __call__(self, x_discrete, rng, dtype=np.float32):
        x = check_pixels(x_discrete)
        u = rng.random(x.shape)
        x_cont = ((x + u) / 256.0).astype(dtype)
        d = int(np.prod(x.shape[1:]))
        corr = np.full(x.shape[0], -d * LOG_256)
        penalty = np.zeros(x.shape[0])
        return Tensor(x_cont), corr, penalty


class VariationalDequantizer(Module):
    """Conditional-flow dequantization: v ~ N(0, I) runs through two
    conditional couplings given image context, u = sigmoid(v).

    Deliberately small; the uniform mode stays the default for acceptance.
    """

    variational = True

    def __init__(self, image_shape, rng, context_channels=8, dtype=np.float32):
        super().__init__()
        c, h, w = image_shape
        self.image_shape = tuple(image_shape)
        self.context = Conv2d(c, context_channels, 3, padding=1, rng=rng, dtype=dtype)
        c1, c2 = AffineCoupling.split_sizes(c)
        from .coupling import SimpleCouplingNet  # cycle-free: coupling imports nn only

        self.couplings = [
            AffineCoupling(
                SimpleCouplingNet(
                    c1 + context_channels, c2, hidden=16, rng=rng, dtype=dtype
                ),
                transformed_first=False,
            ),
            AffineCoupling(
                SimpleCouplingNet(
                    c2 + context_channels, c1, hidden=16, rng=rng, dtype=dtype
                ),
                transformed_first=True,
            ),
        ]

    def __call__(self, x_discrete, rng, dtype=np.float32):
        x = check_pixels(x_discrete)
        b = x.shape[0]
        d = int(np.prod(x.shape[1:]))
        ctx = T.relu(self.context(Tensor((x / 256.0 - 0.5).astype(dtype))))
        v = Tensor(rng.standard_normal(x.shape).astype(dtype))
        base_lp = standard_normal_logprob_np(v.data)
        flow_ld = Tensor(np.zeros(b, dtype=dtype))
        for coup in self.couplings:
            v, ld = self._conditional_forward(coup, v, ctx)
            flow_ld = flow_ld + ld
        u = T.sigmoid(v)
        # ln q(u|x) = ln N(v0) - flow log-det - sum ln sigmoid'(v)
        sig_ld = T.tsum(T.log(u * (1.0 - u) + 1e-12), axis=(1, 2, 3))
        penalty = Tensor(base_lp.astype(dtype)) - flow_ld - sig_ld
        x_cont = (Tensor(x.astype(dtype)) + u) * (1.0 / 256.0)
        corr = np.full(b, -d * LOG_256)
        return x_cont, corr, penalty

    @staticmethod
    def _conditional_forward(coup, v, ctx):
        c = v.shape[1]
        c1, c2 = AffineCoupling.split_sizes(c)
        va, vb = T.split(v, (c1, c2), axis=1)
        if coup.transformed_first:
            cond, target = vb, va
        else:
            cond, target = va, vb
        s, t = coup.net.scale_and_shift(T.concat([cond, ctx], axis=1))
        y_t = target * s + t
        parts = (y_t, cond) if coup.transformed_first else (cond, y_t)
        ld = T.tsum(T.log(s), axis=(1, 2, 3))
        return T.concat(parts, axis=1), ld
