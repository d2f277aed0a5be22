"""Shared test oracles, independent of the library's compute paths:
nested-loop references, finite differences, scalar densities."""

import math

import numpy as np


def loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def loop_conv2d(x, k, padding):
    """Direct 6-nested-loop cross-correlation oracle."""
    b, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    ho = h + 2 * padding - kh + 1
    wo = w + 2 * padding - kw + 1
    xp = np.zeros((b, cin, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    out = np.zeros((b, cout, ho, wo), dtype=np.float64)
    for bi in range(b):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += float(xp[bi, c, i + u, j + v]) * float(
                                    k[o, c, u, v]
                                )
                    out[bi, o, i, j] = acc
    return out


def scalar_softmax(row):
    """64-bit scalar-loop softmax oracle for one row."""
    m = max(float(v) for v in row)
    exps = [math.exp(float(v) - m) for v in row]
    total = sum(exps)
    return np.array([e / total for e in exps])


def scalar_softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def scalar_gaussian_logpdf(z, mean=0.0, std=1.0):
    return (
        -0.5 * ((z - mean) / std) ** 2
        - math.log(std)
        - 0.5 * math.log(2.0 * math.pi)
    )


def fd_scalar_grad(fn, arr, coords, eps=1e-5):
    """Central finite differences of scalar fn() w.r.t. selected flat
    coordinates of arr (mutated in place and restored)."""
    flat = arr.reshape(-1)
    out = {}
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out


def numeric_jacobian(fn, x, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    y0 = np.asarray(fn(x))
    jac = np.zeros((y0.size, x.size))
    flat = x.reshape(-1).copy()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = np.asarray(fn(flat.reshape(x.shape))).reshape(-1)
        flat[i] = orig - eps
        lo = np.asarray(fn(flat.reshape(x.shape))).reshape(-1)
        flat[i] = orig
        jac[:, i] = (hi - lo) / (2 * eps)
    return jac


def exact_attention(q, k, v):
    logits = q @ np.swapaxes(k, -1, -2)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w = w / w.sum(axis=-1, keepdims=True)
    return w @ v


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


class IdentityStubNet:
    """Coupling-net double: s = 1, t = 0 (exact identity coupling)."""

    def __init__(self, out_half):
        self.out_half = out_half

    def scale_and_shift(self, cond):
        from denseflow.tensor import Tensor

        b, _, h, w = cond.shape
        return (
            Tensor(np.ones((b, self.out_half, h, w), dtype=cond.dtype)),
            Tensor(np.zeros((b, self.out_half, h, w), dtype=cond.dtype)),
        )


def force_identity(model):
    """Set every glow module of a FlowModel to the exact identity map."""
    for block in model.blocks:
        for unit in block.units:
            for mod in unit.mods:
                mod.actnorm.scale.data = np.ones_like(mod.actnorm.scale.data)
                mod.actnorm.bias.data = np.zeros_like(mod.actnorm.bias.data)
                mod.actnorm.set_buffer("initialized", np.ones(1, dtype=np.uint8))
                c = mod.invconv.log_s.shape[0]
                dt = mod.invconv.log_s.dtype
                mod.invconv.set_buffer("perm", np.eye(c, dtype=dt))
                mod.invconv.set_buffer("sign_s", np.ones(c, dtype=dt))
                mod.invconv.lower.data = np.zeros((c, c), dtype=dt)
                mod.invconv.upper.data = np.zeros((c, c), dtype=dt)
                mod.invconv.log_s.data = np.zeros(c, dtype=dt)
                mod.coupling.net = IdentityStubNet(mod.coupling.net.out_half)
    return model
