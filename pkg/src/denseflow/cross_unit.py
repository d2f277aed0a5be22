"""Cross-unit coupling: append affinely transformed Gaussian noise channels
between flow units.

The appended half is sigma * e + mu with e ~ N(0, I) and (mu, sigma) read
off previous unit outputs in the block by a small conditioner network. The
likelihood bound picks up -ln p*(e) plus sum(ln sigma) per example. The
sampling direction simply strips the noise channels and never evaluates
the conditioner.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Conv2d, Module
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)

SIGMA_FLOOR = 1e-4


class CrossUnitCoupling(Module):
    """Noise augmentation with growth rate ``k``.

    ``context_channels`` is the total channel count of the conditioning
    concat (all previous unit outputs in the block, plus the current one
    unless ``strict_context``). ``preconditioned=False`` is the ablation
    that appends plain white noise (mu = 0, sigma = 1) and skips the
    conditioner entirely.
    """

    def __init__(self, k, context_channels, rng=None, preconditioned=True,
                 strict_context=False, conditioner=None, dtype=np.float32):
        super().__init__()
        self.k = k
        self.strict_context = strict_context
        self.preconditioned = preconditioned
        self.conditioner_calls = 0
        self.custom_conditioner = conditioner
        if preconditioned and conditioner is None:
            hidden = max(2 * k, 8)
            self.pre = Conv2d(context_channels, hidden, 1, rng=rng, dtype=dtype)
            self.post = Conv2d(hidden, 2 * k, 3, padding=1, rng=rng, dtype=dtype,
                               zero_init=True)

    def _mu_sigma(self, context):
        self.conditioner_calls += 1
        if self.custom_conditioner is not None:
            return self.custom_conditioner(context)
        raw = self.post(T.relu(self.pre(context)))
        mu, sigma_raw = T.split(raw, (self.k, self.k), axis=1)
        sigma = T.softplus(sigma_raw) + SIGMA_FLOOR
        return mu, sigma

    def augment(self, z, context, rng):
        """Returns the augmented tensor plus the bound's correction terms.

        ``context`` lists previous unit outputs in the block (may be empty);
        spatial extents must match ``z``. The noise penalty -ln p*(e) is a
        constant of the draw; the sum(ln sigma) term is the augmentation's
        log-det and stays differentiable.
        """
        b, _, h, w = z.shape
        for ctx in context:
            if ctx.shape[0] != b or ctx.shape[2:] != z.shape[2:]:
                raise ShapeError(
                    f"context tensor {ctx.shape} does not match z {z.shape} "
                    "in batch or spatial extents"
                )
        e = rng.standard_normal((b, self.k, h, w)).astype(z.dtype)
        noise_penalty = 0.5 * (e * e).sum(axis=(1, 2, 3)) + (
            0.5 * self.k * h * w * LOG_2PI
        )
        if self.preconditioned:
            cond_inputs = list(context) if self.strict_context else list(context) + [z]
            cond = cond_inputs[0] if len(cond_inputs) == 1 else T.concat(
                cond_inputs, axis=1
            )
            mu, sigma = self._mu_sigma(cond)
            noise = sigma * Tensor(e) + mu
            logdet = T.tsum(T.log(sigma), axis=(1, 2, 3))
        else:
            noise = Tensor(e)
            logdet = Tensor(np.zeros(b, dtype=z.dtype))
        z_aug = T.concat([z, noise], axis=1)
        return z_aug, logdet, noise_penalty

    def strip(self, z_aug):
        """Drop the trailing noise channels (sampling path; the conditioner
        is never evaluated here)."""
        return strip(z_aug, self.k)


def strip(z_aug, k):
    """Remove the last ``k`` channels appended by augmentation."""
    c = z_aug.shape[1]
    if k > c:
        raise ShapeError(f"cannot strip {k} channels from {c}")
    if k == 0:
        return z_aug
    if isinstance(z_aug, Tensor):
        kept, _ = T.split(z_aug, (c - k, k), axis=1)
        return kept
    return z_aug[:, : c - k]
