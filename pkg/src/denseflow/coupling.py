"""Coupling networks: input projection feeding a densely connected
convolution block and a Nystrom self-attention branch in parallel, blended
by a BN-ReLU-Conv unit into per-channel scale and shift.

The final blend convolution is zero-initialized so every coupling starts
as shift 0 and a constant scale sigmoid(2); the composed flow is an affine
image of the latent draw at step 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import BatchNorm2d, Conv2d, Linear, Module, PositionalEmbedding2d
from .tensor import Tensor


@dataclass(frozen=True)
class CouplingNetConfig:
    proj_channels: int = 16
    dense_layers: int = 3
    dense_growth: int = 8
    attn_heads: int = 1
    attn_landmarks: int = 16
    pinv_iters: int = 6
    kind: str = "fusion"  # "fusion" | "glow"

    def validate(self):
        for field_name in ("proj_channels", "dense_layers", "dense_growth",
                           "attn_heads", "attn_landmarks", "pinv_iters"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"coupling config {field_name} must be >= 1")
        if self.kind not in ("fusion", "glow"):
            raise ConfigError(f"unknown coupling kind '{self.kind}'")
        return self


#: the full-scale coupling setting: 48 projection channels, 7 dense layers,
#: single-head attention.
FULL_SCALE_COUPLING = CouplingNetConfig(
    proj_channels=48, dense_layers=7, dense_growth=32, attn_heads=1,
    attn_landmarks=64,
)


def scale_from_raw(raw):
    """Bounded coupling scale; the +2 shift starts the layer near identity."""
    return T.sigmoid(raw + 2.0)


class DenseBlock(Module):
    """n layers of BN-ReLU-Conv3x3, each consuming the concat of the input
    and all previous layer outputs; output keeps the input channels and
    adds n * growth more."""

    def __init__(self, in_channels, n_layers, growth, rng, dtype=np.float32):
        super().__init__()
        if n_layers < 1:
            raise ConfigError("dense block needs at least one layer")
        self.norms = []
        self.convs = []
        for k in range(n_layers):
            c_k = in_channels + k * growth
            self.norms.append(BatchNorm2d(c_k, dtype=dtype))
            self.convs.append(Conv2d(c_k, growth, 3, padding=1, rng=rng, dtype=dtype))
        self.out_channels = in_channels + n_layers * growth

    def __call__(self, x):
        feats = x
        for norm, conv in zip(self.norms, self.convs):
            h = conv(T.relu(norm(feats)))
            feats = T.concat([feats, h], axis=1)
        return feats


def segment_mean_matrix(n_seq, landmarks, dtype):
    """Averaging matrix onto contiguous position groups (balanced sizes)."""
    base = n_seq // landmarks
    rem = n_seq % landmarks
    mat = np.zeros((landmarks, n_seq), dtype=dtype)
    pos = 0
    for g in range(landmarks):
        size = base + (1 if g < rem else 0)
        mat[g, pos : pos + size] = 1.0 / size
        pos += size
    return mat


def newton_schulz_pinv(a, iters):
    """Iterative pseudo-inverse of the (batched) landmark kernel,
    initialized with a^T / (|a|_1 * |a|_inf)."""
    m = a.shape[-1]
    eye = Tensor(np.eye(m, dtype=a.dtype))
    abs_a = T.absolute(a)
    norm1 = T.amax(T.tsum(abs_a, axis=-2, keepdims=True), axis=-1, keepdims=True)
    norm_inf = T.amax(T.tsum(abs_a, axis=-1, keepdims=True), axis=-2, keepdims=True)
    z = T.transpose(a, _swap_last(a.ndim)) / (norm1 * norm_inf)
    for _ in range(iters):
        az = T.matmul(a, z)
        inner = 7.0 * eye - az
        inner = 15.0 * eye - T.matmul(az, inner)
        inner = 13.0 * eye - T.matmul(az, inner)
        z = T.matmul(z * 0.25, inner)
    return z


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class NystromAttention(Module):
    """Softmax self-attention over flattened spatial positions, with keys
    and queries approximated by landmark (segment-mean) low-rank factors.

    With landmarks == h*w the landmark factors are exact and the output
    collapses to full softmax attention.
    """

    def __init__(self, channels, height, width, landmarks, heads, pinv_iters,
                 rng, dtype=np.float32):
        super().__init__()
        n_seq = height * width
        if landmarks > n_seq:
            raise ConfigError(
                f"attention landmarks ({landmarks}) exceed sequence length ({n_seq})"
            )
        if channels % heads:
            raise ConfigError(
                f"channels ({channels}) not divisible by heads ({heads})"
            )
        self.heads = heads
        self.head_dim = channels // heads
        self.n_seq = n_seq
        self.landmarks = landmarks
        self.pinv_iters = pinv_iters
        self.height = height
        self.width = width
        self.pos = PositionalEmbedding2d(channels, height, width, rng, dtype=dtype)
        # small q/k init keeps initial attention near uniform, where the
        # landmark approximation is accurate
        self.q_proj = Linear(channels, channels, rng=rng, dtype=dtype, init_scale=0.02)
        self.k_proj = Linear(channels, channels, rng=rng, dtype=dtype, init_scale=0.02)
        self.v_proj = Linear(channels, channels, rng=rng, dtype=dtype)
        self.out_proj = Linear(channels, channels, rng=rng, dtype=dtype)
        self.register_buffer(
            "segments", segment_mean_matrix(n_seq, landmarks, dtype)
        )

    def _to_heads(self, x):
        b, n, _ = x.shape
        x = T.reshape(x, (b, n, self.heads, self.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def __call__(self, x):
        b, c, h, w = x.shape
        seq = T.transpose(T.reshape(self.pos(x), (b, c, h * w)), (0, 2, 1))
        scale = 1.0 / math.sqrt(math.sqrt(self.head_dim))
        q = self._to_heads(self.q_proj(seq)) * scale
        k = self._to_heads(self.k_proj(seq)) * scale
        v = self._to_heads(self.v_proj(seq))
        seg = Tensor(self.segments)
        kt = T.transpose(k, (0, 1, 3, 2))
        if self.landmarks == self.n_seq:
            attn = T.softmax(T.matmul(q, kt))
            out = T.matmul(attn, v)
        else:
            q_land = T.matmul(seg, q)
            k_land = T.matmul(seg, k)
            klt = T.transpose(k_land, (0, 1, 3, 2))
            kernel1 = T.softmax(T.matmul(q, klt))
            kernel2 = T.softmax(T.matmul(q_land, klt))
            kernel3 = T.softmax(T.matmul(q_land, kt))
            out = T.matmul(
                T.matmul(kernel1, newton_schulz_pinv(kernel2, self.pinv_iters)),
                T.matmul(kernel3, v),
            )
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, h * w, c))
        out = self.out_proj(out)
        return T.reshape(T.transpose(out, (0, 2, 1)), (b, c, h, w))


class FusionCouplingNet(Module):
    """Two-branch coupling transform: project, run dense block and Nystrom
    attention in parallel, concat, blend with BN-ReLU-Conv to (s_raw, t)."""

    def __init__(self, in_channels, out_half, height, width, cfg, rng,
                 dtype=np.float32):
        super().__init__()
        cfg.validate()
        landmarks = min(cfg.attn_landmarks, height * width)
        self.proj = Conv2d(in_channels, cfg.proj_channels, 1, rng=rng, dtype=dtype)
        self.dense = DenseBlock(
            cfg.proj_channels, cfg.dense_layers, cfg.dense_growth, rng, dtype=dtype
        )
        self.attn = NystromAttention(
            cfg.proj_channels, height, width, landmarks, cfg.attn_heads,
            cfg.pinv_iters, rng, dtype=dtype,
        )
        blend_in = self.dense.out_channels + cfg.proj_channels
        self.blend_norm = BatchNorm2d(blend_in, dtype=dtype)
        self.blend = Conv2d(
            blend_in, 2 * out_half, 3, padding=1, rng=rng, dtype=dtype, zero_init=True
        )
        self.out_half = out_half

    def scale_and_shift(self, cond):
        p = self.proj(cond)
        local = self.dense(p)
        glob = self.attn(p)
        fused = T.concat([local, glob], axis=1)
        raw = self.blend(T.relu(self.blend_norm(fused)))
        raw_s, t = T.split(raw, (self.out_half, self.out_half), axis=1)
        return scale_from_raw(raw_s), t


class GlowCouplingNet(Module):
    """Ablation baseline: plain Conv3-ReLU-Conv1-ReLU-Conv3 coupling net."""

    def __init__(self, in_channels, out_half, hidden, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(in_channels, hidden, 3, padding=1, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(hidden, hidden, 1, rng=rng, dtype=dtype)
        self.conv3 = Conv2d(
            hidden, 2 * out_half, 3, padding=1, rng=rng, dtype=dtype, zero_init=True
        )
        self.out_half = out_half

    def scale_and_shift(self, cond):
        h = T.relu(self.conv1(cond))
        h = T.relu(self.conv2(h))
        raw = self.conv3(h)
        raw_s, t = T.split(raw, (self.out_half, self.out_half), axis=1)
        return scale_from_raw(raw_s), t


class SimpleCouplingNet(Module):
    """Two-convolution coupling net used by the variational dequantizer."""

    def __init__(self, in_channels, out_half, hidden, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(in_channels, hidden, 3, padding=1, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(
            hidden, 2 * out_half, 3, padding=1, rng=rng, dtype=dtype, zero_init=True
        )
        self.out_half = out_half

    def scale_and_shift(self, cond):
        h = T.relu(self.conv1(cond))
        raw = self.conv2(h)
        raw_s, t = T.split(raw, (self.out_half, self.out_half), axis=1)
        return scale_from_raw(raw_s), t


def make_coupling_net(in_channels, out_half, height, width, cfg, rng,
                      dtype=np.float32):
    if cfg.kind == "glow":
        return GlowCouplingNet(in_channels, out_half, 2 * cfg.proj_channels, rng,
                               dtype=dtype)
    return FusionCouplingNet(in_channels, out_half, height, width, cfg, rng,
                             dtype=dtype)
