"""Multi-scale flow assembly: blocks of units, units of glow-like modules
plus cross-unit noise augmentation, squeeze-and-drop between blocks, and a
standard-normal termination.

Naming follows growth-rate notation: a model with L total glow-like modules
and k noise channels per augmentation is an "L-k" instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bijections import (
    ActNorm,
    AffineCoupling,
    FactorOut,
    InvConv1x1,
    LikelihoodTerms,
    Squeeze,
    UniformDequantizer,
    VariationalDequantizer,
    gaussian_logprob,
)
from .coupling import FULL_SCALE_COUPLING, CouplingNetConfig, make_coupling_net
from .cross_unit import CrossUnitCoupling
from .errors import ConfigError, NumericError
from .evaluation import log_mean_exp
from .nn import Module
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class BlockConfig:
    units: int
    modules_per_unit: int


@dataclass(frozen=True)
class FlowConfig:
    blocks: tuple = (BlockConfig(2, 3), BlockConfig(2, 3))
    growth_rate: int = 4
    image_shape: tuple = (3, 8, 8)
    coupling: CouplingNetConfig = field(default_factory=CouplingNetConfig)
    dequantization: str = "uniform"  # "uniform" | "variational"
    cross_unit_context: str = "dense"  # "dense" | "strict"
    factor_prior: str = "conditional"  # "conditional" | "unconditional"
    preconditioned_noise: bool = True
    seed: int = 0

    def validate(self):
        if not self.blocks:
            raise ConfigError("config needs at least one block")
        for i, blk in enumerate(self.blocks):
            if blk.units < 1 or blk.modules_per_unit < 1:
                raise ConfigError(f"block {i + 1}: units and modules must be >= 1")
        if self.growth_rate < 0:
            raise ConfigError("growth_rate must be >= 0")
        if self.dequantization not in ("uniform", "variational"):
            raise ConfigError(f"unknown dequantization '{self.dequantization}'")
        if self.cross_unit_context not in ("dense", "strict"):
            raise ConfigError(f"unknown cross_unit_context '{self.cross_unit_context}'")
        if self.factor_prior not in ("conditional", "unconditional"):
            raise ConfigError(f"unknown factor_prior '{self.factor_prior}'")
        c, h, w = self.image_shape
        squeezes = len(self.blocks) - 1
        if h % (2**squeezes) or w % (2**squeezes):
            raise ConfigError(
                f"spatial extents {h}x{w} not divisible by 2 per squeeze "
                f"({squeezes} squeezes)"
            )
        self.coupling.validate()
        return self

    @property
    def n_modules(self):
        return sum(b.units * b.modules_per_unit for b in self.blocks)

    def name(self):
        return f"DenseFlow-{self.n_modules}-{self.growth_rate}"


def desk_12_4():
    """Desk preset: 2 blocks x 2 units x 3 modules, k=4, for 3x8x8 images."""
    return FlowConfig()


def full_74_10():
    return FlowConfig(
        blocks=(BlockConfig(6, 5), BlockConfig(4, 6), BlockConfig(1, 20)),
        growth_rate=10,
        image_shape=(3, 32, 32),
        coupling=FULL_SCALE_COUPLING,
    )


def full_45_6():
    return FlowConfig(
        blocks=(BlockConfig(5, 3), BlockConfig(3, 5), BlockConfig(1, 15)),
        growth_rate=6,
        image_shape=(3, 32, 32),
        coupling=FULL_SCALE_COUPLING,
    )


PRESETS = {
    "desk-12-4": desk_12_4,
    "full-74-10": full_74_10,
    "full-45-6": full_45_6,
}


class GlowModule(Module):
    """ActNorm, invertible 1x1 convolution, affine coupling."""

    def __init__(self, channels, height, width, coupling_cfg, rng,
                 transformed_first=False, dtype=np.float32):
        super().__init__()
        if channels < 2:
            raise ConfigError(f"glow module needs >= 2 channels, got {channels}")
        self.actnorm = ActNorm(channels, dtype=dtype)
        self.invconv = InvConv1x1(channels, rng, dtype=dtype)
        c1, c2 = AffineCoupling.split_sizes(channels)
        cond_c, out_c = (c2, c1) if transformed_first else (c1, c2)
        net = make_coupling_net(cond_c, out_c, height, width, coupling_cfg, rng,
                                dtype=dtype)
        self.coupling = AffineCoupling(net, transformed_first=transformed_first)

    def forward(self, x):
        y, ld1 = self.actnorm.forward(x)
        y, ld2 = self.invconv.forward(y)
        y, ld3 = self.coupling.forward(y)
        return y, ld1 + ld2 + ld3

    def inverse(self, y):
        x = self.coupling.inverse(y)
        x = self.invconv.inverse(x)
        return self.actnorm.inverse(x)

    def layers(self):
        return (self.actnorm, self.invconv, self.coupling)


class FlowUnit(Module):
    def __init__(self, modules):
        super().__init__()
        self.mods = modules

    def forward(self, x):
        total = None
        for mod in self.mods:
            x, ld = mod.forward(x)
            total = ld if total is None else total + ld
        return x, total

    def inverse(self, y):
        for mod in reversed(self.mods):
            y = mod.inverse(y)
        return y


class FlowBlock(Module):
    def __init__(self, units, cross, squeeze, factor):
        super().__init__()
        self.units = units
        self.cross = cross
        self.squeeze = squeeze
        self.factor = factor


class FlowModel(Module):
    """A built flow with likelihood-bound evaluation and single-pass
    sampling."""

    def __init__(self, config, dtype=np.float32):
        super().__init__()
        self.config = config.validate()
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        c, h, w = config.image_shape
        self.input_dims = c * h * w
        if config.dequantization == "variational":
            self.dequant = VariationalDequantizer(config.image_shape, rng, dtype=dtype)
        else:
            self.dequant = UniformDequantizer()
        self.trace = [("input", (c, h, w))]
        self.blocks = []
        noise_dims = 0
        factored_dims = 0
        k = config.growth_rate
        for bi, blk in enumerate(config.blocks):
            stage = f"block{bi + 1}"
            z0_channels = c
            unit_channels = []  # conditioning context bookkeeping
            units = []
            cross = []
            for ui in range(blk.units):
                mods = []
                for mi in range(blk.modules_per_unit):
                    flip = (mi % 2) == 1
                    try:
                        mods.append(
                            GlowModule(c, h, w, config.coupling, rng,
                                       transformed_first=flip, dtype=dtype)
                        )
                    except ConfigError as err:
                        raise ConfigError(
                            f"{stage}.unit{ui + 1}.module{mi + 1}: {err}"
                        ) from err
                units.append(FlowUnit(mods))
                unit_channels.append(c)
                if ui < blk.units - 1 and k > 0:
                    ctx_channels = z0_channels + sum(unit_channels[:-1])
                    if config.cross_unit_context == "dense":
                        ctx_channels += c
                    cross.append(
                        CrossUnitCoupling(
                            k, ctx_channels, rng=rng,
                            preconditioned=config.preconditioned_noise,
                            strict_context=config.cross_unit_context == "strict",
                            dtype=dtype,
                        )
                    )
                    noise_dims += k * h * w
                    c += k
                    self.trace.append((f"{stage}.augment{ui + 1}", (c, h, w)))
                elif ui < blk.units - 1:
                    cross.append(None)
            squeeze = factor = None
            if bi < len(config.blocks) - 1:
                squeeze = Squeeze()
                c, h, w = 4 * c, h // 2, w // 2
                self.trace.append((f"{stage}.squeeze", (c, h, w)))
                factor = FactorOut(
                    c, rng=rng,
                    conditional=config.factor_prior == "conditional",
                    dtype=dtype,
                )
                factored_dims += (c // 2) * h * w
                c = c // 2
                self.trace.append((f"{stage}.drop", (c, h, w)))
            self.blocks.append(FlowBlock(units, cross, squeeze, factor))
        self.latent_shape = (c, h, w)
        self.trace.append(("latent", (c, h, w)))
        self.noise_dims = noise_dims
        self.factored_dims = factored_dims
        self.final_dims = c * h * w

    # -- bookkeeping -----------------------------------------------------

    def dimension_accounting(self):
        """(input + injected noise, final latent + factored) element counts."""
        return (self.input_dims + self.noise_dims,
                self.final_dims + self.factored_dims)

    def min_conv_scale(self):
        scales = [
            m.min_abs_s() for m in self.modules() if isinstance(m, InvConv1x1)
        ]
        return min(scales) if scales else float("nan")

    def bijections(self):
        for block in self.blocks:
            for unit in block.units:
                for mod in unit.mods:
                    yield from mod.layers()
            if block.squeeze is not None:
                yield block.squeeze
            if block.factor is not None:
                yield block.factor

    @staticmethod
    def _check_finite(name, x, model):
        if not np.isfinite(x.data if isinstance(x, Tensor) else x).all():
            raise NumericError(name, model.min_conv_scale())

    # -- likelihood ------------------------------------------------------

    def _pipeline(self, x_cont, rng, record=None):
        """Run dequantized input through all blocks; returns the final
        tensor plus graph-mode log-det / prior accumulators and the numpy
        noise penalties."""
        b = x_cont.shape[0]
        zero = Tensor(np.zeros(b, dtype=self.dtype))
        logdet = zero
        prior = zero
        noise_np = np.zeros(b)
        z = x_cont
        for bi, block in enumerate(self.blocks):
            stage = f"block{bi + 1}"
            context = [z]
            for ui, unit in enumerate(block.units):
                z, ld = unit.forward(z)
                self._check_finite(f"{stage}.unit{ui + 1}", z, self)
                logdet = logdet + ld
                if ui < len(block.units) - 1 and block.cross[ui] is not None:
                    z_aug, cross_ld, penalty = block.cross[ui].augment(
                        z, context, rng
                    )
                    context.append(z)
                    logdet = logdet + cross_ld
                    noise_np = noise_np + penalty
                    z = z_aug
                elif ui < len(block.units) - 1:
                    context.append(z)
            if block.squeeze is not None:
                z, _ = block.squeeze.forward(z)
                retained, dropped, prior_lp = block.factor.forward(z)
                self._check_finite(f"{stage}.drop", retained, self)
                prior = prior + prior_lp
                if record is not None:
                    record.append(dropped.data.copy())
                z = retained
        final_lp = gaussian_logprob(
            z, Tensor(np.zeros(1, dtype=self.dtype)),
            Tensor(np.zeros(1, dtype=self.dtype)),
        )
        prior = prior + final_lp
        return z, logdet, prior, noise_np

    def bound_terms(self, x_discrete, rng):
        """One-draw likelihood bound as a graph tensor, with its per-example
        component breakdown. The bound is per example, in nats."""
        x_cont, corr, penalty = self.dequant(x_discrete, rng, dtype=self.dtype)
        z, logdet, prior, noise_np = self._pipeline(x_cont, rng)
        dequant = Tensor(corr.astype(self.dtype)) - penalty if isinstance(
            penalty, Tensor
        ) else Tensor((corr - penalty).astype(self.dtype))
        bound = logdet + prior + dequant + Tensor(noise_np.astype(self.dtype))
        terms = LikelihoodTerms(
            logdet=logdet.data.astype(np.float64),
            noise=noise_np.astype(np.float64),
            prior=prior.data.astype(np.float64),
            dequant=dequant.data.astype(np.float64),
        )
        return bound, terms

    def forward_bound(self, x_discrete, rng, mc_samples=1):
        """Monte-Carlo likelihood bound: log-mean-exp over ``mc_samples``
        joint draws of all noises and dequantization samples.

        Returns (per-example bound in nats, averaged component breakdown).
        """
        if mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        draws = []
        acc = None
        with no_grad():
            for _ in range(mc_samples):
                bound, terms = self.bound_terms(x_discrete, rng)
                draws.append(bound.data.astype(np.float64))
                if acc is None:
                    acc = terms
                else:
                    acc = LikelihoodTerms(
                        acc.logdet + terms.logdet,
                        acc.noise + terms.noise,
                        acc.prior + terms.prior,
                        acc.dequant + terms.dequant,
                    )
        stacked = np.stack(draws, axis=0)
        bound = log_mean_exp(stacked, axis=0)
        k = float(mc_samples)
        avg = LikelihoodTerms(acc.logdet / k, acc.noise / k, acc.prior / k,
                              acc.dequant / k)
        return bound, avg

    # -- encode / decode / sample ----------------------------------------

    def encode(self, x_cont, rng):
        """Forward pass recording factored-out latents for exact
        reconstruction. Returns (final latent, dropped latents list)."""
        record = []
        with no_grad():
            z, _, _, _ = self._pipeline(Tensor(x_cont.astype(self.dtype)), rng,
                                        record=record)
        return z.data.copy(), record

    def decode(self, z_final, dropped=None, rng=None, temperature=1.0):
        """Inverse pass from the final latent back to continuous pixels.

        ``dropped`` supplies exact factored-out latents (reconstruction);
        when None they are drawn from the conditional priors (sampling).
        """
        z = np.asarray(z_final, dtype=self.dtype)
        drop_iter = None if dropped is None else list(reversed(dropped))
        for bi in range(len(self.blocks) - 1, -1, -1):
            block = self.blocks[bi]
            if block.factor is not None:
                if drop_iter is not None:
                    z = np.concatenate([z, drop_iter.pop(0)], axis=1)
                else:
                    z = block.factor.inverse(z, rng, temperature)
                z = block.squeeze.inverse(z)
            for ui in range(len(block.units) - 1, -1, -1):
                z = block.units[ui].inverse(z)
                if ui > 0 and block.cross[ui - 1] is not None:
                    z = block.cross[ui - 1].strip(z)
        return z

    def sample(self, n, temperature=0.8, rng=None):
        """Draw images in one inverse pass (no MC loop, conditioners never
        evaluated). Returns uint8 pixels."""
        if temperature < 0:
            raise ConfigError("temperature must be >= 0")
        rng = np.random.default_rng() if rng is None else rng
        c, h, w = self.latent_shape
        z = (temperature * rng.standard_normal((n, c, h, w))).astype(self.dtype)
        x_cont = self.decode(z, rng=rng, temperature=temperature)
        return np.clip(np.floor(x_cont * 256.0), 0, 255).astype(np.uint8)

    # -- reporting ---------------------------------------------------------

    def shape_trace(self):
        return list(self.trace)

    def describe(self):
        lines = [f"{self.config.name()} on {self.config.image_shape}"]
        lines.append(f"parameters: {self.n_parameters()}")
        inflow, outflow = self.dimension_accounting()
        lines.append(
            f"dimensions: input {self.input_dims} + noise {self.noise_dims} "
            f"= latent {self.final_dims} + factored {self.factored_dims} "
            f"({inflow} = {outflow})"
        )
        for name, shape in self.trace:
            lines.append(f"  {name:<24} {shape[0]}x{shape[1]}x{shape[2]}")
        return "\n".join(lines)


def build(config, dtype=np.float32):
    """Build a model from config with deterministic seeded initialization."""
    return FlowModel(config, dtype=dtype)
